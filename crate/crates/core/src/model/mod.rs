//! The self-attentive next-item recommender: feature extractor, shared
//! embedding decoder, gradients, Adam and vocabulary growth.

mod network;
mod params;
mod tensor;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use network::Dropout;
pub use params::{Block, GradientSet, LayerNorm, ModelConfig, Params};
pub use tensor::Matrix;

use crate::losses::{self, LossBreakdown};
use crate::{rng, Error, Result};

/// φ(x): the sequence representation at the last prefix position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Softmax output over an item index range.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution {
    pub probs: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn support_size(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub first: Params,
    pub second: Params,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub moments: AdamMoments,
}

pub fn init_model(cfg: &ModelConfig, item_count: usize, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    if item_count == 0 {
        return Err(Error::invalid("item_count must be at least 1"));
    }
    let params = params::init_params(cfg, item_count, seed);
    let zeros = params.zeros_like();
    Ok(ModelState {
        config: ModelConfig { seed, ..*cfg },
        moments: AdamMoments {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        },
        params,
    })
}

/// Which target an example is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Item(usize),
    /// A full distribution over `0..item_range`, e.g. a teacher's softmax.
    Distribution(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    /// Cross-entropy on current-cycle data.
    CrossEntropy,
    /// Distillation against the previous model on exemplars.
    Distillation,
    /// Plain cross-entropy on replayed exemplars.
    Replay,
}

impl TermKind {
    fn tag(self) -> u64 {
        match self {
            TermKind::CrossEntropy => 1,
            TermKind::Distillation => 2,
            TermKind::Replay => 3,
        }
    }
}

/// One additive loss term: `weight * (1/normalizer) * Σ loss(example)`.
#[derive(Debug, Clone)]
pub struct LossTerm<'a> {
    pub kind: TermKind,
    pub weight: f64,
    pub item_range: usize,
    pub normalizer: f64,
    pub examples: Vec<(&'a [usize], Target<'a>)>,
}

#[derive(Debug, Clone, Default)]
pub struct BatchSpec<'a> {
    pub terms: Vec<LossTerm<'a>>,
    /// Training mode: dropout at the configured rate with masks keyed by this seed.
    pub dropout_seed: Option<u64>,
}

impl ModelState {
    pub fn item_count(&self) -> usize {
        self.params.item_count()
    }

    fn dropout_for(&self, seed: Option<u64>) -> Option<Dropout> {
        seed.filter(|_| self.config.dropout_rate > 0.0).map(|seed| Dropout {
            rate: self.config.dropout_rate,
            seed,
        })
    }
}

/// φ(x). With `dropout_seed` set, dropout is applied at the configured rate.
pub fn extract_features(state: &ModelState, prefix: &[usize], dropout_seed: Option<u64>) -> Result<FeatureVector> {
    let trace = network::forward(&state.params, state.config.attention_heads, prefix, state.dropout_for(dropout_seed))?;
    Ok(FeatureVector(trace.feature().to_vec()))
}

/// Per-position representations of a whole sequence (inference mode).
pub fn extract_sequence_features(state: &ModelState, sequence: &[usize]) -> Result<Vec<FeatureVector>> {
    let trace = network::forward(&state.params, state.config.attention_heads, sequence, None)?;
    Ok((0..trace.len()).map(|p| FeatureVector(trace.output(p).to_vec())).collect())
}

/// Bilinear decoder against the shared item embeddings, over items `0..item_range`.
pub fn predict_logits(state: &ModelState, feature: &FeatureVector, item_range: usize) -> Result<Vec<f64>> {
    if item_range > state.item_count() {
        return Err(Error::IndexOutOfRange {
            index: item_range,
            len: state.item_count(),
        });
    }
    let e = &state.params.item_embeddings;
    Ok((0..item_range).map(|i| tensor::dot(&feature.0, e.row(i))).collect())
}

/// Logits of a prefix in inference mode.
pub fn score(state: &ModelState, prefix: &[usize], item_range: usize) -> Result<Vec<f64>> {
    let f = extract_features(state, prefix, None)?;
    predict_logits(state, &f, item_range)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> ProbabilityDistribution {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    ProbabilityDistribution { probs }
}

/// Loss value and exact gradient of a composed objective over `ω ∘ φ`.
pub fn loss_and_gradients(state: &ModelState, batch: &BatchSpec) -> Result<(LossBreakdown, GradientSet)> {
    let params = &state.params;
    let dim = params.embed_dim();
    let mut grads = params.zeros_like();
    let mut breakdown = LossBreakdown::default();
    for term in &batch.terms {
        if term.weight == 0.0 || term.examples.is_empty() {
            continue;
        }
        if term.item_range > state.item_count() || term.item_range == 0 {
            return Err(Error::IndexOutOfRange {
                index: term.item_range,
                len: state.item_count(),
            });
        }
        let mut value = 0.0;
        let scale = term.weight / term.normalizer;
        for (slot, (prefix, target)) in term.examples.iter().enumerate() {
            let dropout = batch
                .dropout_seed
                .map(|s| rng::derive(s, &[term.kind.tag(), slot as u64]));
            let trace = network::forward(params, state.config.attention_heads, prefix, state.dropout_for(dropout))?;
            let feature = trace.feature();
            let e = &params.item_embeddings;
            let logits: Vec<f64> = (0..term.item_range).map(|i| tensor::dot(feature, e.row(i))).collect();
            let (loss, mut d_logits) = match *target {
                Target::Item(y) => {
                    if y >= term.item_range {
                        return Err(Error::IndexOutOfRange { index: y, len: term.item_range });
                    }
                    losses::cross_entropy(&logits, y)
                }
                Target::Distribution(teacher) => {
                    if teacher.len() != term.item_range {
                        return Err(Error::ShapeMismatch(format!(
                            "teacher distribution has {} entries, range is {}",
                            teacher.len(),
                            term.item_range
                        )));
                    }
                    losses::distillation(&logits, teacher)
                }
            };
            value += loss;
            d_logits.iter_mut().for_each(|g| *g *= scale);
            // decoder: logits_i = φ · E_i
            let mut d_out = vec![0.0; trace.len() * dim];
            let d_feature = &mut d_out[(trace.len() - 1) * dim..];
            for (i, &g) in d_logits.iter().enumerate() {
                if g != 0.0 {
                    tensor::axpy(g, e.row(i), d_feature);
                    tensor::axpy(g, feature, grads.item_embeddings.row_mut(i));
                }
            }
            network::backward(params, &trace, &d_out, &mut grads);
        }
        let value = value / term.normalizer;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{:?} term", term.kind)));
        }
        match term.kind {
            TermKind::CrossEntropy => breakdown.ce += value,
            TermKind::Distillation => breakdown.kd += value,
            TermKind::Replay => breakdown.replay += value,
        }
        breakdown.total += term.weight * value;
    }
    Ok((breakdown, grads))
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step(state: &mut ModelState, grads: &GradientSet, cfg: &AdamConfig) -> Result<()> {
    state.params.check_shape(grads, "gradients do not match parameters")?;
    let m = &mut state.moments;
    m.step += 1;
    let t = m.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m1), m2) in state
        .params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.first.tensors_mut())
        .zip(m.second.tensors_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m1.data[i] = cfg.beta1 * m1.data[i] + (1.0 - cfg.beta1) * gi;
            m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m1.data[i] / c1;
            let vhat = m2.data[i] / c2;
            p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// New item rows are the init distribution scaled by 0.01; old rows and their
/// moments are untouched, new moments are zero.
pub fn grow_vocabulary(state: &mut ModelState, new_item_count: usize, seed: u64) -> Result<()> {
    let old = state.item_count();
    if new_item_count < old {
        return Err(Error::Shrink { from: old, to: new_item_count });
    }
    let dim = state.params.embed_dim();
    state.params.pad_items(new_item_count);
    for i in old..new_item_count {
        let row = params::item_row(dim, seed, i, 0.01);
        state.params.item_embeddings.row_mut(i).copy_from_slice(&row);
    }
    state.moments.first.pad_items(new_item_count);
    state.moments.second.pad_items(new_item_count);
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "ader-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint<'a> {
    format: String,
    item_count: usize,
    tensor_names: Vec<String>,
    state: std::borrow::Cow<'a, ModelState>,
}

/// JSON container with config, registry size, and every named tensor with its shape.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_owned(),
        item_count: state.item_count(),
        tensor_names: state.params.tensor_names(),
        state: std::borrow::Cow::Borrowed(state),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {}", ck.format)));
    }
    let state = ck.state.into_owned();
    if state.item_count() != ck.item_count
        || !state.params.same_shape(&state.moments.first)
        || !state.params.same_shape(&state.moments.second)
    {
        return Err(bad("inconsistent tensor shapes".into()));
    }
    for t in state.params.tensors() {
        if t.data.len() != t.rows * t.cols {
            return Err(bad("tensor data does not match its shape".into()));
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
