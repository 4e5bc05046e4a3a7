//! Generate-then-rank type inference for Python functions.
//!
//! A small encoder-decoder model proposes candidate annotations for a
//! `<TYPE>` placeholder with beam search; a contrastively trained copy of the
//! model scores every candidate, together with the user-defined types visible
//! through imports, by contextual similarity. The final ranking uses the sum of
//! generative likelihood and similarity.

pub mod evaluation;
pub mod gtr_inference;
pub mod import_analysis;
pub mod seq_model;
pub mod source_model;
pub mod synthetic;
pub mod training;
pub mod type_lang;
