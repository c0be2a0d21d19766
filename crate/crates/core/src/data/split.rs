use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CycleDataset, CycleStats, ItemRegistry, Session, TrainingExample, DEFAULT_MAX_SEQ_LEN};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub period_seconds: i64,
    pub validation_fraction: f64,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            period_seconds: 7 * 24 * 3600,
            validation_fraction: 0.1,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

/// All-prefix expansion: position j >= 1 becomes a target with the
/// `max_seq_len` most recent items before it as prefix.
pub fn expand_session(items: &[usize], max_seq_len: usize) -> Vec<TrainingExample> {
    (1..items.len())
        .map(|j| {
            let start = j.saturating_sub(max_seq_len.max(1));
            TrainingExample::new(items[start..j].to_vec(), items[j])
        })
        .collect()
}

/// Splits examples into (train, validation) by seeded uniform sampling;
/// both halves keep input order.
pub(crate) fn holdout(
    examples: Vec<TrainingExample>,
    fraction: f64,
    seed: u64,
    cycle: usize,
) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let n = examples.len();
    let held = ((n as f64) * fraction).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed, &[rng::tag("validation"), cycle as u64]));
    let mut is_val = vec![false; n];
    for &i in &order[..held] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - held), Vec::with_capacity(held));
    for (ex, v) in examples.into_iter().zip(is_val) {
        if v {
            val.push(ex)
        } else {
            train.push(ex)
        }
    }
    (train, val)
}

/// Builds one cycle from its sessions. `registry` must already hold every item.
pub(crate) fn build_cycle(
    cycle_id: usize,
    sessions: &[&[usize]],
    registry: &ItemRegistry,
    cfg: &SplitConfig,
) -> CycleDataset {
    let mut stats = CycleStats {
        sessions: sessions.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for items in sessions {
        stats.actions += items.len();
        stats.new_item_actions += items
            .iter()
            .filter(|&&i| registry.first_seen(i) == Some(cycle_id))
            .count();
        examples.extend(expand_session(items, cfg.max_seq_len));
    }
    let (train, validation) = holdout(examples, cfg.validation_fraction, cfg.seed, cycle_id);
    CycleDataset {
        cycle_id,
        train,
        validation,
        item_count_after: registry.count_through(cycle_id),
        stats,
    }
}

/// Buckets sessions by start time into update cycles.
///
/// Empty periods are skipped, so cycle ids are consecutive. The registry is
/// re-indexed if needed so that items of cycle t always precede those first
/// seen later, which keeps `0..item_count_after(t)` the item set of cycle t.
pub fn split_cycles(
    sessions: &[Session],
    registry: &mut ItemRegistry,
    cfg: &SplitConfig,
) -> Result<Vec<CycleDataset>> {
    if cfg.period_seconds <= 0 {
        return Err(Error::invalid("period_seconds must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::invalid("validation_fraction must be in [0, 1)"));
    }
    let min_time = sessions
        .iter()
        .map(|s| s.start_time)
        .min()
        .ok_or(Error::TooFewCycles(0))?;
    let mut buckets: BTreeMap<i64, Vec<&Session>> = BTreeMap::new();
    for s in sessions {
        buckets
            .entry((s.start_time - min_time).div_euclid(cfg.period_seconds))
            .or_default()
            .push(s);
    }
    if buckets.len() < 2 {
        return Err(Error::TooFewCycles(buckets.len()));
    }

    let mut first_cycle = vec![usize::MAX; registry.len()];
    for (cycle, bucket) in buckets.values().enumerate() {
        for s in bucket {
            for &i in &s.items {
                if i >= registry.len() {
                    return Err(Error::IndexOutOfRange { index: i, len: registry.len() });
                }
                first_cycle[i] = first_cycle[i].min(cycle);
            }
        }
    }
    let mut order: Vec<usize> = (0..registry.len()).collect();
    order.sort_by_key(|&i| (first_cycle[i], i));
    let mut remap = vec![0; registry.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let keys = order
        .iter()
        .map(|&i| registry.key(i).unwrap_or_default().to_owned())
        .collect();
    let seen = order
        .iter()
        .map(|&i| (first_cycle[i] != usize::MAX).then_some(first_cycle[i]))
        .collect();
    *registry = ItemRegistry::from_parts(keys, seen);

    Ok(buckets
        .values()
        .enumerate()
        .map(|(cycle, bucket)| {
            let remapped: Vec<Vec<usize>> = bucket
                .iter()
                .map(|s| s.items.iter().map(|&i| remap[i]).collect())
                .collect();
            let views: Vec<&[usize]> = remapped.iter().map(Vec::as_slice).collect();
            build_cycle(cycle, &views, registry, cfg)
        })
        .collect())
}
