//! Beam search and greedy decoding.
//!
//! Hypotheses are scored by the raw product of step probabilities, with no
//! length normalization. Only EOS and regular vocabulary tokens are expanded.

use std::cmp::Ordering;

use super::model::SeqModelParams;
use super::tensor::Tensor;
use super::vocab::{BOS, EOS};
use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids after BOS; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    pub likelihood: f64,
    pub finished: bool,
}

/// Likelihood descending, then token ids ascending.
pub fn hypothesis_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.likelihood.total_cmp(&a.likelihood).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Up to `k` hypotheses of at most `max_len` generated tokens (EOS included),
/// sorted by likelihood descending.
pub fn beam_generate(
    params: &SeqModelParams,
    hidden: &Tensor,
    k: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>, ModelError> {
    assert!(k >= 1, "beam width must be at least 1");
    let emittable = params.vocab.emittable();
    let mut decoder = params.decoder(hidden);
    let mut alive = vec![BeamHypothesis { tokens: Vec::new(), likelihood: 1.0, finished: false }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::with_capacity(alive.len() * emittable.len());
        for hyp in &alive {
            let prefix: Vec<usize> = std::iter::once(BOS).chain(hyp.tokens.iter().copied()).collect();
            let probs = decoder.step(&prefix)?;
            for &id in &emittable {
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                expansions.push(BeamHypothesis { tokens, likelihood: hyp.likelihood * probs[id], finished: id == EOS });
            }
        }
        expansions.sort_by(hypothesis_order);
        expansions.truncate(k);
        let (finished, rest): (Vec<_>, Vec<_>) = expansions.into_iter().partition(|h| h.finished);
        done.extend(finished);
        alive = rest;
        if alive.is_empty() {
            break;
        }
        // Step probabilities are at most one, so no descendant of `alive` can
        // beat a likelihood it is already below.
        if done.len() >= k {
            done.sort_by(hypothesis_order);
            done.truncate(k);
            if done[k - 1].likelihood > alive[0].likelihood {
                alive.clear();
                break;
            }
        }
    }
    done.extend(alive);
    done.sort_by(hypothesis_order);
    done.truncate(k);
    Ok(done)
}

/// Repeatedly takes the most probable emittable token (lowest id on ties).
/// Equivalent to a beam of width one.
pub fn greedy(params: &SeqModelParams, hidden: &Tensor, max_len: usize) -> Result<BeamHypothesis, ModelError> {
    let emittable = params.vocab.emittable();
    let mut decoder = params.decoder(hidden);
    let mut hyp = BeamHypothesis { tokens: Vec::new(), likelihood: 1.0, finished: false };
    for _ in 0..max_len {
        let prefix: Vec<usize> = std::iter::once(BOS).chain(hyp.tokens.iter().copied()).collect();
        let probs = decoder.step(&prefix)?;
        // compare products, as beam search does, so ties resolve identically
        let score = |id: usize| hyp.likelihood * probs[id];
        let mut best = emittable[0];
        for &id in &emittable[1..] {
            if score(id) > score(best) {
                best = id;
            }
        }
        hyp.tokens.push(best);
        hyp.likelihood *= probs[best];
        if best == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}
