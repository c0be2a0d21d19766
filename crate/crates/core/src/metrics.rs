//! Recall@k and MRR@k over full-vocabulary rankings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;
use crate::{Error, Result};

/// 1-based rank of `target`: items scored strictly higher, plus equal-scored
/// items with a lower index, come first.
pub fn rank_of_target(logits: &[f64], target: usize) -> Result<usize> {
    let &t = logits.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        len: logits.len(),
    })?;
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count();
    Ok(1 + ahead)
}

/// `None` marks a target that could not be ranked at all (treated as rank ∞).
pub type Rank = Option<usize>;

fn check(ranks: &[Rank], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    Ok(())
}

pub fn recall_at_k(ranks: &[Rank], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn mrr_at_k(ranks: &[Rank], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let sum: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r <= k => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(sum / ranks.len() as f64)
}

/// Result of evaluating one trained cycle on the next cycle's data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    /// The cycle the model was trained on; evaluation uses cycle_id + 1.
    pub cycle_id: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
    pub test_example_count: usize,
    pub unseen_target_fraction: f64,
    pub mean_losses: LossBreakdown,
    pub lambda_t: f64,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub exemplar_count: usize,
}

impl CycleReport {
    pub fn from_ranks(cycle_id: usize, ranks: &[Rank], ks: &[usize]) -> Result<Self> {
        let mut report = CycleReport {
            cycle_id,
            test_example_count: ranks.len(),
            unseen_target_fraction: ranks.iter().filter(|r| r.is_none()).count() as f64 / ranks.len().max(1) as f64,
            ..Default::default()
        };
        for &k in ks {
            report.recall_at.insert(k, recall_at_k(ranks, k)?);
            report.mrr_at.insert(k, mrr_at_k(ranks, k)?);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every cycle counts once.
    #[default]
    PerCycle,
    /// Cycles weighted by their test-example count.
    PerEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
}

pub fn aggregate(reports: &[CycleReport], weighting: Weighting) -> MetricMeans {
    let weight = |r: &CycleReport| match weighting {
        Weighting::PerCycle => 1.0,
        Weighting::PerEvent => r.test_example_count as f64,
    };
    let total: f64 = reports.iter().map(weight).sum();
    let mean = |pick: fn(&CycleReport) -> &BTreeMap<usize, f64>| {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for r in reports {
            for (&k, &v) in pick(r) {
                *out.entry(k).or_default() += weight(r) * v;
            }
        }
        out.values_mut().for_each(|v| *v /= total);
        out
    };
    MetricMeans {
        recall_at: mean(|r| &r.recall_at),
        mrr_at: mean(|r| &r.mrr_at),
    }
}
