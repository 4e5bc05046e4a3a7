//! The encoder-decoder sequence model: tokenization, encoding, stepwise
//! decoding, beam search, likelihood and similarity.

mod beam;
mod checkpoint;
pub mod graph;
mod model;
pub mod tensor;
mod vocab;

use thiserror::Error;

pub use beam::{beam_generate, greedy, hypothesis_order, BeamHypothesis};
pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint, FORMAT_VERSION};
pub use model::{tensor_specs, Decoder, Dims, SeqModelParams, TensorSpec};
pub use tensor::{cosine, log_sum_exp, Tensor};
pub use vocab::{pre_tokenize, Vocab, BOS, EOS, OOV_TEXT, TYPE, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `-log(e^pos / (e^pos + Σ e^neg))` with temperature 1.
pub fn infonce_loss(sim_pos: f64, sim_negs: &[f64]) -> Result<f64, ModelError> {
    if sim_negs.is_empty() {
        return Err(ModelError::EmptyNegatives);
    }
    let mut all = Vec::with_capacity(sim_negs.len() + 1);
    all.push(sim_pos);
    all.extend_from_slice(sim_negs);
    Ok((log_sum_exp(&all) - sim_pos).max(0.0))
}
