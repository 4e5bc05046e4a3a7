//! Dataset construction and the two training procedures: generative
//! fine-tuning on masked annotations and contrastive fine-tuning of the
//! similarity model.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gtr_inference::{generate_candidates, Origin};
use crate::import_analysis::{ImportError, Provenance, TypeVisibility, VisibleTypeSet};
use crate::seq_model::{ModelError, SeqModelParams, Tensor};
use crate::source_model::{mask_annotations, PythonFunction, TrainingPair, TypeMissedFunction, TypeSlot, VarKind};
use crate::type_lang::{parse_type, TypeCategory};

/// Global gradient-norm cap applied to every batch.
pub const CLIP_NORM: f64 = 1.0;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("no candidate types for {0}: beam and visible sets are both empty")]
    EmptyCandidateUniverse(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Import(#[from] ImportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beam_k: usize,
    pub seed: u64,
    /// Drop probability on embeddings and residual branches while training.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { epochs: 3, learning_rate: 1e-5, batch_size: 8, beam_k: 5, seed: 0, dropout: 0.0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainingError::InvalidHyperparams(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidHyperparams("batch_size 0".into()));
        }
        if self.beam_k == 0 {
            return Err(TrainingError::InvalidHyperparams("beam_k 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainingError::InvalidHyperparams(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

/// Canonical rendering of a type text, used as the training target; falls
/// back to the whitespace-normalized text if it does not parse.
pub fn canonical_type_text(text: &str) -> String {
    match parse_type(text) {
        Ok(t) => t.render(),
        Err(_) => crate::type_lang::normalize_whitespace(text),
    }
}

fn type_key(text: &str) -> String {
    match parse_type(text) {
        Ok(t) => t.key(),
        Err(_) => crate::type_lang::normalize_whitespace(text),
    }
}

/// Every masked annotation of every function, in corpus order. Functions
/// that fail to parse are skipped.
pub fn build_generation_dataset(corpus: &[PythonFunction]) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for f in corpus {
        match mask_annotations(f) {
            Ok(p) => pairs.extend(p),
            Err(e) => log::warn!("{}: skipping {}: {e}", f.file_path, f.name),
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveInstance {
    pub anchor: TypeMissedFunction,
    pub positive: String,
    pub negatives: Vec<String>,
    pub negative_origins: Vec<Origin>,
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Negatives for one pair: beam candidates and visible types, minus the
/// positive, sampled down to `k`.
fn sample_negatives(
    positive: &str,
    generated: &[String],
    visible: &VisibleTypeSet,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(String, Origin)>> {
    let mut universe: Vec<(String, Origin)> = Vec::new();
    let mut seen = HashSet::new();
    for t in generated {
        if seen.insert(type_key(t)) {
            universe.push((t.clone(), Origin::Generated));
        }
    }
    for name in visible.names() {
        if seen.insert(type_key(name)) {
            universe.push((name.to_string(), Origin::Visible));
        }
    }
    if universe.is_empty() {
        return None;
    }
    let pos = type_key(positive);
    universe.retain(|(t, _)| type_key(t) != pos);
    Some(universe.choose_multiple(rng, k).cloned().collect())
}

/// One instance per pair. Beam negatives come from `gen`, visible ones from
/// `visibility`; the union minus the positive is sampled uniformly to `k`
/// with a per-pair stream of `seed`, so the result does not depend on
/// processing order.
pub fn build_contrastive_dataset(
    pairs: &[TrainingPair],
    gen: &SeqModelParams,
    visibility: &dyn TypeVisibility,
    k: usize,
    seed: u64,
) -> Result<Vec<ContrastiveInstance>, TrainingError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let generated = generate_candidates(gen, &pair.input, k);
        let visible = visibility.visible_for(&pair.input.function.file_path)?;
        let positive = canonical_type_text(&pair.expected_type);
        let negatives = sample_negatives(&positive, &generated.texts, &visible, k, &mut pair_rng(seed, i))
            .ok_or_else(|| TrainingError::EmptyCandidateUniverse(pair.input.function.file_path.clone()))?;
        out.push(ContrastiveInstance {
            anchor: pair.input.clone(),
            positive,
            negative_origins: negatives.iter().map(|(_, o)| *o).collect(),
            negatives: negatives.into_iter().map(|(t, _)| t).collect(),
        });
    }
    Ok(out)
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Adam { lr, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: SeqModelParams,
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Linear warmup over the first 5% of steps, then linear decay to a tenth
/// of the peak rate. `step` is 1-based.
pub fn lr_factor(step: usize, total: usize) -> f64 {
    let warmup = total / 20;
    if step <= warmup {
        return step as f64 / warmup as f64;
    }
    let progress = (step - 1 - warmup) as f64 / (total - warmup).max(1) as f64;
    1.0 - 0.9 * progress.min(1.0)
}

/// Shared minibatch loop: shuffles example indices each epoch, averages
/// gradients over a batch, clips and applies Adam.
fn train_loop<F>(
    params: &SeqModelParams,
    n_examples: usize,
    hyper: &Hyperparams,
    what: &str,
    loss_grad: F,
) -> Result<Trained, TrainingError>
where
    F: Fn(&SeqModelParams, usize, u64) -> Result<Option<(f64, Vec<Tensor>)>, ModelError>,
{
    hyper.validate()?;
    let mut model = params.clone();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    if hyper.epochs == 0 || n_examples == 0 {
        return Ok(Trained { params: model, epoch_losses });
    }
    let mut adam = Adam::new(&model.tensors, hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let total_steps = hyper.epochs * n_examples.div_ceil(hyper.batch_size);
    let mut global_step = 0usize;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut counted) = (0.0, 0usize);
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for &i in batch {
                let dropout_seed = rng.gen::<u64>();
                let Some((loss, grads)) = loss_grad(&model, i, dropout_seed)? else { continue };
                if !loss.is_finite() {
                    return Err(TrainingError::NonFiniteLoss { epoch, step, loss });
                }
                total += loss;
                counted += 1;
                used += 1;
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    None => acc = Some(grads),
                }
            }
            let Some(mut grads) = acc else { continue };
            let scale = 1.0 / used as f64;
            grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= scale));
            clip(&mut grads, CLIP_NORM);
            global_step += 1;
            adam.set_lr(hyper.learning_rate * lr_factor(global_step, total_steps));
            adam.step(&mut model.tensors, &grads);
        }
        let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
        log::info!("{what} epoch {}: mean loss {mean:.5} over {counted} examples", epoch + 1);
        epoch_losses.push(mean);
    }
    model.snap_to_f32();
    Ok(Trained { params: model, epoch_losses })
}

/// Teacher-forced cross-entropy on the canonical expected type of each pair.
pub fn train_generative(
    params: &SeqModelParams,
    pairs: &[TrainingPair],
    hyper: &Hyperparams,
) -> Result<Trained, TrainingError> {
    let examples: Vec<(Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|p| (params.tokenize(p.input.text()), params.type_target(&canonical_type_text(&p.expected_type))))
        .collect();
    train_loop(params, examples.len(), hyper, "generative", |model, i, seed| {
        let (x, y) = &examples[i];
        match model.generative_loss_grad_dropout(x, y, hyper.dropout, seed) {
            Ok(r) => Ok(Some(r)),
            Err(ModelError::SequenceTooLong { len, max }) => {
                log::warn!("skipping example {i}: target of {len} tokens exceeds {max}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    })
}

/// Mean InfoNCE over instances; instances without negatives are skipped.
pub fn train_contrastive(
    params: &SeqModelParams,
    instances: &[ContrastiveInstance],
    hyper: &Hyperparams,
) -> Result<Trained, TrainingError> {
    type Example = (Vec<usize>, Vec<usize>, Vec<Vec<usize>>);
    let examples: Vec<Example> = instances
        .iter()
        .map(|c| {
            (
                params.tokenize(c.anchor.text()),
                params.vocab.encode_pieces(&c.positive),
                c.negatives.iter().map(|n| params.vocab.encode_pieces(n)).collect(),
            )
        })
        .collect();
    train_loop(params, examples.len(), hyper, "contrastive", |model, i, seed| {
        let (x, pos, negs) = &examples[i];
        if negs.is_empty() {
            return Ok(None);
        }
        match model.contrastive_loss_grad_dropout(x, pos, negs, hyper.dropout, seed) {
            Ok(r) => Ok(Some(r)),
            Err(ModelError::SequenceTooLong { len, max }) => {
                log::warn!("skipping instance {i}: {len} tokens exceed {max}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub kind: VarKind,
    pub name: String,
    pub index: usize,
}

/// One line of the dataset JSONL file. `function` is the type-missed text;
/// `negatives` is empty until contrastive negatives have been sampled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub function: String,
    pub function_name: String,
    pub line_span: (usize, usize),
    pub slot: SlotRecord,
    pub expected_type: String,
    pub category: TypeCategory,
    pub file_path: String,
    pub visible_types: Vec<String>,
    pub negatives: Vec<String>,
    #[serde(default)]
    pub unseen: bool,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, pair: &TrainingPair, visible: &VisibleTypeSet, negatives: &[String]) -> Self {
        let slot = &pair.input.slot;
        let f = &pair.input.function;
        DatasetRecord {
            id: id.into(),
            function: f.source_text.clone(),
            function_name: f.name.clone(),
            line_span: f.line_span,
            slot: SlotRecord { kind: slot.var_kind, name: slot.var_name.clone(), index: slot.occurrence_index },
            expected_type: pair.expected_type.clone(),
            category: pair.category,
            file_path: f.file_path.clone(),
            visible_types: visible.names().map(str::to_string).collect(),
            negatives: negatives.to_vec(),
            unseen: false,
        }
    }

    pub fn type_missed(&self) -> TypeMissedFunction {
        TypeMissedFunction {
            function: PythonFunction {
                file_path: self.file_path.clone(),
                name: self.function_name.clone(),
                source_text: self.function.clone(),
                line_span: self.line_span,
            },
            slot: TypeSlot {
                var_kind: self.slot.kind,
                var_name: self.slot.name.clone(),
                occurrence_index: self.slot.index,
            },
        }
    }

    pub fn training_pair(&self) -> TrainingPair {
        TrainingPair { input: self.type_missed(), expected_type: self.expected_type.clone(), category: self.category }
    }

    /// Visible names as a set; provenance is not stored in the file.
    pub fn visible(&self) -> VisibleTypeSet {
        self.visible_types.iter().map(|n| (n.as_str(), Provenance::Imported)).collect()
    }
}
