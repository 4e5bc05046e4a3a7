//! Two-stage inference: beam-generate candidate types, pool them with the
//! user-defined types visible from the file, and rank the pool by the sum of
//! generative likelihood and contextual similarity.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::import_analysis::VisibleTypeSet;
use crate::seq_model::{beam_generate, cosine, ModelError, SeqModelParams, Tensor};
use crate::source_model::{TypeMissedFunction, TypeSlot};
use crate::type_lang::{is_admissible, parse_type, TypeExpr};

pub const DEFAULT_BEAM_K: usize = 5;
/// Upper bound on generated type length, in tokens (EOS included).
pub const MAX_TYPE_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    Generated,
    Visible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub type_expr: TypeExpr,
    pub origin: Origin,
    pub lik: f64,
    pub sim: f64,
    pub score: f64,
}

impl Candidate {
    pub fn new(type_expr: TypeExpr, origin: Origin, lik: f64, sim: f64) -> Self {
        Candidate { type_expr, origin, lik, sim, score: lik + sim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub slot: TypeSlot,
    pub candidates: Vec<Candidate>,
}

impl RankedPrediction {
    pub fn top(&self, k: usize) -> &[Candidate] {
        &self.candidates[..k.min(self.candidates.len())]
    }
}

/// Which score terms are computed. A disabled term is stored as zero, so
/// `score = lik + sim` holds in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreTerms {
    Both,
    LikelihoodOnly,
    SimilarityOnly,
}

/// Beam outputs, detokenized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratedCandidates {
    /// Canonical text of each parseable output, best first, deduplicated.
    pub texts: Vec<String>,
    /// Outputs that did not parse as a type expression.
    pub dropped: Vec<String>,
}

pub fn generate_candidates(gen: &SeqModelParams, func: &TypeMissedFunction, k: usize) -> GeneratedCandidates {
    let ids = gen.tokenize(func.text());
    // tokenize() truncates to max_seq_len, so encoding cannot fail on length
    let hidden = gen.encode(&ids).expect("tokenized input fits the model");
    generate_from_hidden(gen, &hidden, k)
}

fn generate_from_hidden(gen: &SeqModelParams, hidden: &Tensor, k: usize) -> GeneratedCandidates {
    let max_len = MAX_TYPE_TOKENS.min(gen.dims.max_seq_len - 1);
    let hyps = beam_generate(gen, hidden, k, max_len).expect("beam length is bounded by max_seq_len");
    let mut out = GeneratedCandidates::default();
    let mut seen = HashSet::new();
    for h in hyps {
        let text = gen.vocab.detokenize(&h.tokens);
        match parse_type(&text) {
            Ok(t) if h.finished => {
                if seen.insert(t.key()) {
                    out.texts.push(t.render());
                }
            }
            _ => {
                log::debug!("dropping unparseable beam output {text:?}");
                out.dropped.push(text);
            }
        }
    }
    out
}

/// Admissible generated candidates followed by every visible type,
/// deduplicated by normalized text. A type that is both generated and
/// visible keeps origin `Generated`.
pub fn build_pool(generated: &[String], visible: &VisibleTypeSet) -> Result<Vec<(TypeExpr, Origin)>, InferenceError> {
    let mut pool = Vec::new();
    let mut seen = HashSet::new();
    for text in generated {
        let Ok(t) = parse_type(text) else { continue };
        if is_admissible(&t, visible) && seen.insert(t.key()) {
            pool.push((t, Origin::Generated));
        }
    }
    for name in visible.names() {
        let t = TypeExpr::atom(name);
        if seen.insert(t.key()) {
            pool.push((t, Origin::Visible));
        }
    }
    if pool.is_empty() {
        Err(InferenceError::EmptyPool)
    } else {
        Ok(pool)
    }
}

/// Encoder outputs of one function under both models, reused across
/// candidates.
pub struct Scorer<'a> {
    gen: &'a SeqModelParams,
    simm: &'a SeqModelParams,
    gen_hidden: Option<Tensor>,
    sim_hidden: Option<Tensor>,
    sim_anchor: Vec<f64>,
    terms: ScoreTerms,
}

impl<'a> Scorer<'a> {
    pub fn new(
        gen: &'a SeqModelParams,
        simm: &'a SeqModelParams,
        func: &TypeMissedFunction,
        terms: ScoreTerms,
    ) -> Result<Self, ModelError> {
        let gen_hidden = match terms {
            ScoreTerms::SimilarityOnly => None,
            _ => Some(gen.encode(&gen.tokenize(func.text()))?),
        };
        let sim_hidden = match terms {
            ScoreTerms::LikelihoodOnly => None,
            _ => Some(simm.encode(&simm.tokenize(func.text()))?),
        };
        let sim_anchor = sim_hidden.as_ref().map(Tensor::mean_rows).unwrap_or_default();
        Ok(Scorer { gen, simm, gen_hidden, sim_hidden, sim_anchor, terms })
    }

    /// Beam candidates from the cached generation-model encoding.
    pub fn generate(&self, k: usize) -> GeneratedCandidates {
        match &self.gen_hidden {
            Some(h) => generate_from_hidden(self.gen, h, k),
            None => GeneratedCandidates::default(),
        }
    }

    pub fn score(&self, t: &TypeExpr, origin: Origin) -> Result<Candidate, ModelError> {
        let text = t.render();
        let lik = match &self.gen_hidden {
            Some(h) => self.gen.sequence_likelihood(h, &self.gen.type_target(&text))?,
            None => 0.0,
        };
        let sim = match &self.sim_hidden {
            Some(h) => {
                let states = self.simm.decoder(h).states(&self.simm.vocab.encode_pieces(&text))?;
                cosine(&self.sim_anchor, &states.mean_rows())
            }
            None => 0.0,
        };
        Ok(Candidate::new(t.clone(), origin, lik, sim))
    }

    /// Scores and sorts `pool`.
    pub fn rank(&self, slot: &TypeSlot, pool: &[(TypeExpr, Origin)]) -> Result<RankedPrediction, ModelError> {
        let mut candidates = pool.iter().map(|(t, o)| self.score(t, *o)).collect::<Result<Vec<_>, _>>()?;
        sort_candidates(&mut candidates);
        Ok(RankedPrediction { slot: slot.clone(), candidates })
    }

    pub fn terms(&self) -> ScoreTerms {
        self.terms
    }
}

/// Score descending, then likelihood descending, then canonical text.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.lik.total_cmp(&a.lik))
        .then_with(|| a.type_expr.key().cmp(&b.type_expr.key()))
}

pub fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(candidate_order);
}

pub fn score_candidate(
    gen: &SeqModelParams,
    simm: &SeqModelParams,
    func: &TypeMissedFunction,
    cand: &TypeExpr,
    origin: Origin,
) -> Result<Candidate, ModelError> {
    Scorer::new(gen, simm, func, ScoreTerms::Both)?.score(cand, origin)
}

pub fn rank(
    gen: &SeqModelParams,
    simm: &SeqModelParams,
    func: &TypeMissedFunction,
    pool: &[(TypeExpr, Origin)],
) -> Result<RankedPrediction, ModelError> {
    Scorer::new(gen, simm, func, ScoreTerms::Both)?.rank(&func.slot, pool)
}

/// The full pipeline for one type-missed function.
pub fn infer(
    gen: &SeqModelParams,
    simm: &SeqModelParams,
    func: &TypeMissedFunction,
    visible: &VisibleTypeSet,
    k: usize,
) -> Result<RankedPrediction, InferenceError> {
    let scorer = Scorer::new(gen, simm, func, ScoreTerms::Both)?;
    let generated = scorer.generate(k);
    let pool = build_pool(&generated.texts, visible)?;
    Ok(scorer.rank(&func.slot, &pool)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    #[serde(rename = "type")]
    pub type_text: String,
    pub score: f64,
    pub lik: f64,
    pub sim: f64,
    pub origin: Origin,
}

/// One line of the prediction JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub file_path: String,
    pub slot: TypeSlot,
    pub ranked: Vec<RankedEntry>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, file_path: impl Into<String>, prediction: &RankedPrediction) -> Self {
        PredictionRecord {
            id: id.into(),
            file_path: file_path.into(),
            slot: prediction.slot.clone(),
            ranked: prediction
                .candidates
                .iter()
                .map(|c| RankedEntry {
                    type_text: c.type_expr.render(),
                    score: c.score,
                    lik: c.lik,
                    sim: c.sim,
                    origin: c.origin,
                })
                .collect(),
        }
    }
}
