//! Training objectives: cross-entropy on new data, distillation on exemplars,
//! the adaptive interpolation weight, and the EWC penalty.

use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::model::{self, BatchSpec, GradientSet, LossTerm, ModelState, Params, Target, TermKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_base: f64,
    /// Recomputed at each cycle boundary.
    pub lambda_t: f64,
    pub ewc_strength: f64,
}

/// Loss components of one step or epoch. `total` is the weighted sum of the
/// active terms: `ce + lambda_t*kd + replay_weight*replay + ewc_strength*ewc`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    /// Cross-entropy on replayed exemplars (exemplar-replay variants).
    pub replay: f64,
    pub ewc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.kd += other.kd;
        self.replay += other.replay;
        self.ewc += other.ewc;
        self.total += other.total;
    }

    pub fn scaled(&self, by: f64) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce * by,
            kd: self.kd * by,
            replay: self.replay * by,
            ewc: self.ewc * by,
            total: self.total * by,
        }
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `-log p_y` and its gradient `p - onehot(y)` with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

/// `-Σ teacher_i log p_i` and its gradient `p·Σteacher - teacher`.
pub fn distillation(logits: &[f64], teacher: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mass: f64 = teacher.iter().sum();
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(teacher)
        .map(|(&z, &t)| {
            let log_p = z - lse;
            if t != 0.0 {
                loss -= t * log_p;
            }
            log_p.exp() * mass - t
        })
        .collect();
    (loss, grad)
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean cross-entropy over `0..item_range` in inference mode, plus each
/// example's logit gradient `(p - onehot(y)) / n`.
pub fn ce_loss(state: &ModelState, examples: &[TrainingExample], item_range: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples for cross-entropy"));
    }
    let n = examples.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.target >= item_range {
            return Err(Error::IndexOutOfRange { index: ex.target, len: item_range });
        }
        let logits = model::score(state, &ex.prefix, item_range)?;
        let (loss, mut g) = cross_entropy(&logits, ex.target);
        total += loss;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Softmax of the previous model's logits over `0..old_item_range` for each exemplar.
pub fn teacher_distributions(
    previous: &ModelState,
    exemplars: &[TrainingExample],
    old_item_range: usize,
) -> Result<Vec<Vec<f64>>> {
    exemplars
        .iter()
        .map(|ex| Ok(model::softmax(&model::score(previous, &ex.prefix, old_item_range)?).probs))
        .collect()
}

/// Distillation loss over old items, averaged over exemplars, plus each
/// exemplar's logit gradient `(p - p̂) / |E|`. No gradient reaches `previous`.
pub fn kd_loss(
    previous: &ModelState,
    current: &ModelState,
    exemplars: &[TrainingExample],
    old_item_range: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if exemplars.is_empty() {
        return Err(Error::invalid("empty exemplar set: distillation is undefined"));
    }
    if previous.item_count() < old_item_range {
        return Err(Error::IndexOutOfRange {
            index: old_item_range,
            len: previous.item_count(),
        });
    }
    let teachers = teacher_distributions(previous, exemplars, old_item_range)?;
    let n = exemplars.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(exemplars.len());
    for (ex, teacher) in exemplars.iter().zip(&teachers) {
        let logits = model::score(current, &ex.prefix, old_item_range)?;
        let (loss, mut g) = distillation(&logits, teacher);
        total += loss;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// `lambda_base * sqrt(|I_{t-1}|/|I_t| * |E_{t-1}|/|D_t|)`.
pub fn adaptive_lambda(
    lambda_base: f64,
    old_items: usize,
    total_items: usize,
    exemplar_count: usize,
    data_count: usize,
) -> Result<f64> {
    if total_items == 0 || data_count == 0 {
        return Err(Error::invalid("adaptive lambda needs nonzero |I_t| and |D_t|"));
    }
    if old_items > total_items {
        return Err(Error::invalid("old item count exceeds current item count"));
    }
    // one rounding per side keeps equal ratios exact
    let num = (old_items as u128 * exemplar_count as u128) as f64;
    let den = (total_items as u128 * data_count as u128) as f64;
    Ok(lambda_base * (num / den).sqrt())
}

pub fn ader_loss(ce: f64, kd: f64, lambda_t: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        kd,
        total: ce + lambda_t * kd,
        ..Default::default()
    }
}

/// Diagonal Fisher estimate, shape-matched to the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal(pub Params);

/// Mean over exemplars of element-wise squared per-example CE gradients.
pub fn fisher_diagonal(state: &ModelState, exemplars: &[TrainingExample], item_range: usize) -> Result<FisherDiagonal> {
    if exemplars.is_empty() {
        return Err(Error::invalid("empty exemplar set: Fisher is undefined"));
    }
    let mut fisher = state.params.zeros_like();
    for ex in exemplars {
        let batch = BatchSpec {
            terms: vec![LossTerm {
                kind: TermKind::CrossEntropy,
                weight: 1.0,
                item_range,
                normalizer: 1.0,
                examples: vec![(&ex.prefix, Target::Item(ex.target))],
            }],
            dropout_seed: None,
        };
        let (_, grads) = model::loss_and_gradients(state, &batch)?;
        for (f, g) in fisher.tensors_mut().into_iter().zip(grads.tensors()) {
            for (fi, gi) in f.data.iter_mut().zip(&g.data) {
                *fi += gi * gi;
            }
        }
    }
    fisher.scale(1.0 / exemplars.len() as f64);
    Ok(FisherDiagonal(fisher))
}

/// `(1/2) Σ F_j (θ_j - θ*_j)^2` and its gradient `F_j (θ_j - θ*_j)`.
pub fn ewc_penalty(params: &Params, anchor: &Params, fisher: &FisherDiagonal) -> Result<(f64, GradientSet)> {
    params.check_shape(anchor, "EWC anchor does not match parameters")?;
    params.check_shape(&fisher.0, "Fisher diagonal does not match parameters")?;
    let mut grads = params.zeros_like();
    let mut penalty = 0.0;
    for (((p, a), f), g) in params
        .tensors()
        .into_iter()
        .zip(anchor.tensors())
        .zip(fisher.0.tensors())
        .zip(grads.tensors_mut())
    {
        for i in 0..p.data.len() {
            let diff = p.data[i] - a.data[i];
            penalty += 0.5 * f.data[i] * diff * diff;
            g.data[i] = f.data[i] * diff;
        }
    }
    Ok((penalty, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let (loss, g) = cross_entropy(&[1000.0, 0.0, 0.0], 0);
        assert!(loss.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ce_uniform_over_four() {
        let (loss, g) = cross_entropy(&[0.3; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
        assert!((g[2] + 0.75).abs() < 1e-12 && (g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kd_two_items() {
        // p = softmax([0,0]) = [0.5, 0.5]
        let (loss, g) = distillation(&[0.0, 0.0], &[0.75, 0.25]);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.25).abs() < 1e-12 && (g[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kd_one_hot_match_contributes_nothing() {
        let (loss, _) = distillation(&[800.0, 0.0, 0.0], &[1.0, 0.0, 0.0]);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn lambda_cases() {
        assert_eq!(adaptive_lambda(0.8, 100, 100, 500, 500).unwrap(), 0.8);
        let l = adaptive_lambda(0.8, 80, 100, 30_000, 37_500).unwrap();
        assert!((l - 0.64).abs() < 1e-12);
        let a = adaptive_lambda(1.0, 50, 80, 900, 1000).unwrap();
        let b = adaptive_lambda(1.0, 50, 80, 900, 4000).unwrap();
        assert!((b - a / 2.0).abs() < 1e-12);
        assert!(adaptive_lambda(1.0, 0, 0, 1, 1).is_err());
        assert!(adaptive_lambda(1.0, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn ader_combination() {
        assert_eq!(ader_loss(1.3, 0.0, 0.7).total, 1.3);
        assert!((ader_loss(1.0, 0.5, 0.64).total - 1.32).abs() < 1e-12);
        assert_eq!(ader_loss(1.1, 0.9, 0.0).total, 1.1);
    }

    fn tiny(seed: u64) -> ModelState {
        let cfg = ModelConfig { embed_dim: 4, block_count: 1, max_seq_len: 5, ..Default::default() };
        init_model(&cfg, 6, seed).unwrap()
    }

    #[test]
    fn ewc_scalar_and_zero_cases() {
        let state = tiny(1);
        let mut anchor = state.params.clone();
        let mut fisher = state.params.zeros_like();
        let (p, g) = ewc_penalty(&state.params, &anchor, &FisherDiagonal(fisher.clone())).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));

        fisher.item_embeddings.data[0] = 2.0;
        anchor.item_embeddings.data[0] = state.params.item_embeddings.data[0] - 3.0;
        let (p, g) = ewc_penalty(&state.params, &anchor, &FisherDiagonal(fisher.clone())).unwrap();
        assert!((p - 9.0).abs() < 1e-9);
        assert!((g.item_embeddings.data[0] - 6.0).abs() < 1e-9);
        fisher.scale(2.0);
        let (p2, _) = ewc_penalty(&state.params, &anchor, &FisherDiagonal(fisher)).unwrap();
        assert!((p2 - 2.0 * p).abs() < 1e-9);
    }

    #[test]
    fn ewc_shape_mismatch() {
        let a = tiny(1);
        let mut b = tiny(2);
        crate::model::grow_vocabulary(&mut b, 9, 0).unwrap();
        let f = FisherDiagonal(a.params.zeros_like());
        assert!(matches!(ewc_penalty(&a.params, &b.params, &f), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fisher_of_single_exemplar_is_squared_gradient() {
        let state = tiny(3);
        let ex = TrainingExample::new(vec![1, 2], 4);
        let f = fisher_diagonal(&state, std::slice::from_ref(&ex), 6).unwrap();
        let batch = BatchSpec {
            terms: vec![LossTerm {
                kind: TermKind::CrossEntropy,
                weight: 1.0,
                item_range: 6,
                normalizer: 1.0,
                examples: vec![(&ex.prefix, Target::Item(4))],
            }],
            dropout_seed: None,
        };
        let (_, g) = model::loss_and_gradients(&state, &batch).unwrap();
        for (ft, gt) in f.0.tensors().iter().zip(g.tensors()) {
            for (a, b) in ft.data.iter().zip(&gt.data) {
                assert_eq!(*a, b * b);
            }
        }
        assert!(fisher_diagonal(&state, &[], 6).is_err());
    }

    #[test]
    fn ce_loss_mean_normalization() {
        let state = tiny(4);
        let ex = TrainingExample::new(vec![0, 3], 1);
        let (one, _) = ce_loss(&state, std::slice::from_ref(&ex), 6).unwrap();
        let (two, g) = ce_loss(&state, &[ex.clone(), ex], 6).unwrap();
        assert!((one - two).abs() < 1e-12);
        assert_eq!(g.len(), 2);
        assert!(ce_loss(&state, &[TrainingExample::new(vec![0], 6)], 6).is_err());
    }

    #[test]
    fn kd_against_identical_model_is_entropy_with_zero_gradient() {
        let state = tiny(5);
        let exemplars = vec![TrainingExample::new(vec![0, 1], 2), TrainingExample::new(vec![4], 3)];
        let (loss, grads) = kd_loss(&state, &state, &exemplars, 5).unwrap();
        let teachers = teacher_distributions(&state, &exemplars, 5).unwrap();
        let mean_entropy = teachers.iter().map(|t| entropy(t)).sum::<f64>() / 2.0;
        assert!((loss - mean_entropy).abs() < 1e-12);
        assert!(grads.iter().flatten().all(|g| g.abs() <= 1e-12));
        assert!(kd_loss(&state, &state, &[], 5).is_err());
    }

    proptest! {
        #[test]
        fn ce_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 1..30), pick in any::<prop::sample::Index>()) {
            let y = pick.index(logits.len());
            let (loss, _) = cross_entropy(&logits, y);
            prop_assert!(loss >= 0.0);
        }

        #[test]
        fn kd_gibbs_bound(
            pairs in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 2..20),
        ) {
            let (student, teacher_logits): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let teacher = model::softmax(&teacher_logits).probs;
            let (loss, _) = distillation(&student, &teacher);
            prop_assert!(loss >= 0.0);
            prop_assert!(loss >= entropy(&teacher) - 1e-12);
            let (same, g) = distillation(&teacher_logits, &teacher);
            prop_assert!((same - entropy(&teacher)).abs() < 1e-9);
            prop_assert!(g.iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn lambda_scales_with_sqrt_of_exemplars(
            old in 1usize..500, extra in 0usize..500, e in 1usize..5000, d in 1usize..5000, c in 1usize..20,
        ) {
            let a = adaptive_lambda(0.9, old, old + extra, e, d).unwrap();
            let b = adaptive_lambda(0.9, old, old + extra, e * c * c, d).unwrap();
            prop_assert!(a > 0.0);
            prop_assert!((b - c as f64 * a).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn ewc_strictly_convex_along_coordinates(f in 0.01f64..10.0, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let state = tiny(9);
            let anchor = state.params.clone();
            let mut fisher = state.params.zeros_like();
            fisher.position_embeddings.data[3] = f;
            let fisher = FisherDiagonal(fisher);
            let at = |v: f64| {
                let mut p = state.params.clone();
                p.position_embeddings.data[3] += v;
                ewc_penalty(&p, &anchor, &fisher).unwrap().0
            };
            let mid = at(0.5 * (x + y));
            prop_assert!(mid <= 0.5 * (at(x) + at(y)) + 1e-12);
            if (x - y).abs() > 1e-3 {
                prop_assert!(mid < 0.5 * (at(x) + at(y)));
            }
        }
    }
}
