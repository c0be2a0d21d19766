use super::*;
use crate::data::TrainingExample;
use proptest::prelude::*;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        block_count: 1,
        attention_heads: 2,
        max_seq_len: 6,
        dropout_rate: 0.0,
        seed: 0,
    }
}

fn ce_batch<'a>(examples: &'a [TrainingExample], range: usize, normalizer: f64) -> LossTerm<'a> {
    LossTerm {
        kind: TermKind::CrossEntropy,
        weight: 1.0,
        item_range: range,
        normalizer,
        examples: examples.iter().map(|e| (e.prefix.as_slice(), Target::Item(e.target))).collect(),
    }
}

#[test]
fn init_shapes_and_determinism() {
    let a = init_model(&small_cfg(), 5, 11).unwrap();
    let b = init_model(&small_cfg(), 5, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.params.item_embeddings.rows, a.params.item_embeddings.cols), (5, 8));
    assert!(a.moments.first.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    assert_ne!(a, init_model(&small_cfg(), 5, 12).unwrap());
    assert!(init_model(&small_cfg(), 0, 1).is_err());
    assert!(init_model(&ModelConfig { attention_heads: 3, ..small_cfg() }, 5, 1).is_err());
}

#[test]
fn zero_dropout_train_equals_inference() {
    let s = init_model(&small_cfg(), 7, 1).unwrap();
    let a = extract_features(&s, &[1, 2, 3], Some(99)).unwrap();
    let b = extract_features(&s, &[1, 2, 3], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dropout_is_seeded() {
    let s = init_model(&ModelConfig { dropout_rate: 0.3, ..small_cfg() }, 7, 1).unwrap();
    let a = extract_features(&s, &[1, 2, 3], Some(5)).unwrap();
    assert_eq!(a, extract_features(&s, &[1, 2, 3], Some(5)).unwrap());
    assert_ne!(a, extract_features(&s, &[1, 2, 3], Some(6)).unwrap());
    assert_ne!(a, extract_features(&s, &[1, 2, 3], None).unwrap());
}

#[test]
fn single_item_prefix_depends_only_on_that_item() {
    let mut s = init_model(&small_cfg(), 7, 1).unwrap();
    let before = extract_features(&s, &[4], None).unwrap();
    // perturb every other item row and all later positions
    for i in (0..7).filter(|&i| i != 4) {
        s.params.item_embeddings.row_mut(i).iter_mut().for_each(|v| *v += 1.0);
    }
    for p in 1..6 {
        s.params.position_embeddings.row_mut(p).iter_mut().for_each(|v| *v -= 0.5);
    }
    assert_eq!(before, extract_features(&s, &[4], None).unwrap());
}

#[test]
fn causal_prefix_features_match_sequence_positions() {
    let s = init_model(&small_cfg(), 9, 3).unwrap();
    let seq = [3, 1, 4, 1, 5, 8];
    let per_pos = extract_sequence_features(&s, &seq).unwrap();
    for j in 0..seq.len() {
        let alone = extract_features(&s, &seq[..=j], None).unwrap();
        for (a, b) in alone.0.iter().zip(&per_pos[j].0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // changing a later item leaves earlier positions alone
    let mut other = seq;
    other[4] = 0;
    let changed = extract_sequence_features(&s, &other).unwrap();
    assert_eq!(changed[3], per_pos[3]);
    assert_ne!(changed[4], per_pos[4]);
}

#[test]
fn out_of_range_prefix() {
    let s = init_model(&small_cfg(), 4, 0).unwrap();
    assert!(matches!(extract_features(&s, &[4], None), Err(Error::IndexOutOfRange { .. })));
    assert!(extract_features(&s, &[], None).is_err());
}

#[test]
fn logits_follow_embeddings() {
    let mut s = init_model(&small_cfg(), 4, 0).unwrap();
    for i in 0..4 {
        let row = s.params.item_embeddings.row_mut(i);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[i] = 1.0;
    }
    let f = FeatureVector(s.params.item_embeddings.row(2).to_vec());
    let logits = predict_logits(&s, &f, 4).unwrap();
    assert_eq!(crate::metrics::rank_of_target(&logits, 2).unwrap(), 1);
    assert_eq!(predict_logits(&s, &f, 3).unwrap().len(), 3);
    assert!(predict_logits(&s, &f, 5).is_err());
    let zero = predict_logits(&s, &FeatureVector(vec![0.0; 8]), 4).unwrap();
    assert!(zero.iter().all(|&z| z == 0.0));
    assert!(softmax(&zero).probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax(&[0.0, 0.0]).probs, vec![0.5, 0.5]);
    let p = softmax(&[1000.0, 0.0]).probs;
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
    let p = softmax(&[0.0, 2f64.ln(), 3f64.ln()]).probs;
    for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        z in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&z).probs;
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).probs;
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn numeric_gradient(state: &ModelState, batch: &BatchSpec, tensor: usize, index: usize, h: f64) -> f64 {
    let eval = |delta: f64| {
        let mut s = state.clone();
        s.params.tensors_mut()[tensor].data[index] += delta;
        loss_and_gradients(&s, batch).unwrap().0.total
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

#[test]
fn gradients_match_finite_differences_with_dropout() {
    let state = init_model(&ModelConfig { dropout_rate: 0.2, ..small_cfg() }, 10, 21).unwrap();
    let examples = vec![
        TrainingExample::new(vec![0, 5, 2], 7),
        TrainingExample::new(vec![9], 1),
        TrainingExample::new(vec![3, 3, 8, 1, 0, 6, 2], 4),
    ];
    let batch = BatchSpec {
        terms: vec![ce_batch(&examples, 10, 3.0)],
        dropout_seed: Some(17),
    };
    let (_, grads) = loss_and_gradients(&state, &batch).unwrap();
    let tensors = grads.tensors();
    let mut worst: f64 = 0.0;
    for (t, tensor) in tensors.iter().enumerate() {
        for i in (0..tensor.len()).step_by(7) {
            let numeric = numeric_gradient(&state, &batch, t, i, 1e-5);
            let analytic = tensor.data[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_weight_recipe_gives_zero_gradients() {
    let state = init_model(&small_cfg(), 6, 2).unwrap();
    let examples = vec![TrainingExample::new(vec![1, 2], 3)];
    let mut term = ce_batch(&examples, 6, 1.0);
    term.weight = 0.0;
    let (loss, grads) = loss_and_gradients(&state, &BatchSpec { terms: vec![term], dropout_seed: None }).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(grads.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn duplicated_example_doubles_contribution() {
    let state = init_model(&small_cfg(), 6, 2).unwrap();
    let one = [TrainingExample::new(vec![1, 2], 3), TrainingExample::new(vec![4], 0)];
    let dup = vec![one[0].clone(), one[0].clone(), one[1].clone()];
    // sum-then-mean with the doubled count: compare against explicit 2x weight
    let (_, g_dup) = loss_and_gradients(&state, &BatchSpec { terms: vec![ce_batch(&dup, 6, 3.0)], dropout_seed: None }).unwrap();
    let (_, g_a) = loss_and_gradients(&state, &BatchSpec { terms: vec![ce_batch(&one[..1], 6, 3.0)], dropout_seed: None }).unwrap();
    let (_, g_b) = loss_and_gradients(&state, &BatchSpec { terms: vec![ce_batch(&one[1..], 6, 3.0)], dropout_seed: None }).unwrap();
    let mut expected = g_a.clone();
    expected.add_scaled(1.0, &g_a);
    expected.add_scaled(1.0, &g_b);
    for (x, y) in g_dup.tensors().iter().zip(expected.tensors()) {
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut s = init_model(&small_cfg(), 3, 0).unwrap();
    let before = s.params.clone();
    let mut ones = s.params.zeros_like();
    for t in ones.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 1.0);
    }
    let cfg = AdamConfig { lr: 0.001, ..Default::default() };
    adam_step(&mut s, &ones, &cfg).unwrap();
    assert_eq!(s.moments.step, 1);
    for (a, b) in s.params.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(((x - y) + 0.001).abs() < 1e-10);
        }
    }

    let snapshot = s.clone();
    let zeros = s.params.zeros_like();
    adam_step(&mut s, &zeros, &cfg).unwrap();
    // parameters still move on momentum; with fresh moments they would not
    let mut fresh = init_model(&small_cfg(), 3, 0).unwrap();
    let p0 = fresh.params.clone();
    adam_step(&mut fresh, &zeros, &cfg).unwrap();
    assert_eq!(fresh.params, p0);
    assert!((s.moments.first.item_embeddings.data[0] - 0.9 * snapshot.moments.first.item_embeddings.data[0]).abs() < 1e-15);
    assert!((s.moments.second.item_embeddings.data[0] - 0.999 * snapshot.moments.second.item_embeddings.data[0]).abs() < 1e-15);

    let mut a = snapshot.clone();
    let mut b = snapshot;
    adam_step(&mut a, &ones, &cfg).unwrap();
    adam_step(&mut b, &ones, &cfg).unwrap();
    assert_eq!(a, b);

    let mut grown = init_model(&small_cfg(), 4, 0).unwrap();
    assert!(matches!(adam_step(&mut grown, &ones, &cfg), Err(Error::ShapeMismatch(_))));
}

#[test]
fn growth_preserves_old_rows_and_logits() {
    let mut s = init_model(&small_cfg(), 5, 8).unwrap();
    let same = s.clone();
    grow_vocabulary(&mut s, 5, 8).unwrap();
    assert_eq!(s, same);

    let f = extract_features(&s, &[0, 4, 2], None).unwrap();
    let old_logits = predict_logits(&s, &f, 5).unwrap();
    grow_vocabulary(&mut s, 8, 8).unwrap();
    assert_eq!(s.item_count(), 8);
    assert_eq!(&s.params.item_embeddings.data[..40], &same.params.item_embeddings.data[..]);
    assert_eq!(s.moments.first.item_embeddings.rows, 8);
    assert!(s.moments.second.item_embeddings.data[40..].iter().all(|&v| v == 0.0));
    let f2 = extract_features(&s, &[0, 4, 2], None).unwrap();
    assert_eq!(f, f2);
    assert_eq!(old_logits, predict_logits(&s, &f2, 5).unwrap());
    // new rows are small
    let bound = 0.01 / 8f64.sqrt();
    assert!(s.params.item_embeddings.data[40..].iter().all(|v| v.abs() <= bound));
    assert!(matches!(grow_vocabulary(&mut s, 6, 0), Err(Error::Shrink { .. })));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut s = init_model(&small_cfg(), 6, 4).unwrap();
    let ex = vec![TrainingExample::new(vec![1, 2], 3)];
    let (_, g) = loss_and_gradients(&s, &BatchSpec { terms: vec![ce_batch(&ex, 6, 1.0)], dropout_seed: None }).unwrap();
    adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&s, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for (a, b) in s.params.tensors().iter().zip(back.params.tensors()) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(s, back);
    std::fs::write(&path, "{}").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
