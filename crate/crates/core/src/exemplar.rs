//! Fixed-capacity exemplar memory: frequency-proportional quotas and herding
//! selection, plus the random, smallest-loss and equal-quota variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::losses;
use crate::model::{self, ModelState};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Frequency-proportional quotas, herding within each item.
    Herding,
    /// Frequency-proportional quotas, uniform sampling within each item.
    Random,
    /// Frequency-proportional quotas, smallest cross-entropy first.
    Loss,
    /// Equal quotas per item, herding within each item.
    EqualHerding,
}

impl SelectionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Herding => "herding",
            SelectionStrategy::Random => "random",
            SelectionStrategy::Loss => "loss",
            SelectionStrategy::EqualHerding => "equal_herding",
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "herding" => Ok(Self::Herding),
            "random" => Ok(Self::Random),
            "loss" => Ok(Self::Loss),
            "equal_herding" => Ok(Self::EqualHerding),
            other => Err(Error::invalid(format!("unknown selection strategy `{other}`"))),
        }
    }
}

/// Per-item exemplar counts over item indices `0..|I_t|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaAllocation {
    pub quotas: Vec<usize>,
}

impl QuotaAllocation {
    pub fn total(&self) -> usize {
        self.quotas.iter().sum()
    }
}

/// `N * c_i / C`, floored, with the leftover handed out by largest remainder
/// (ties to the lower index) so the total is exactly `min(N, C)`.
pub fn allocate_quota(counts: &[usize], capacity: usize) -> Result<QuotaAllocation> {
    if capacity == 0 {
        return Err(Error::invalid("exemplar capacity must be positive"));
    }
    let pool: usize = counts.iter().sum();
    if pool == 0 {
        return Err(Error::invalid("all item counts are zero"));
    }
    if capacity >= pool {
        return Ok(QuotaAllocation { quotas: counts.to_vec() });
    }
    let (n, c) = (capacity as u128, pool as u128);
    let mut quotas: Vec<usize> = counts.iter().map(|&ci| (n * ci as u128 / c) as usize).collect();
    let remainders: Vec<u128> = counts.iter().map(|&ci| n * ci as u128 % c).collect();
    let leftover = capacity - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in &order[..leftover] {
        quotas[i] += 1;
    }
    Ok(QuotaAllocation { quotas })
}

/// Equal shares per item that has candidates, clamped to what each item has;
/// capacity freed by clamping is re-shared, remainders go to lower indices.
pub fn allocate_equal(counts: &[usize], capacity: usize) -> Result<QuotaAllocation> {
    if capacity == 0 {
        return Err(Error::invalid("exemplar capacity must be positive"));
    }
    let pool: usize = counts.iter().sum();
    if pool == 0 {
        return Err(Error::invalid("all item counts are zero"));
    }
    let mut quotas = vec![0; counts.len()];
    let mut remaining = capacity.min(pool);
    let mut active: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    while remaining > 0 && !active.is_empty() {
        let share = remaining / active.len();
        let extra = remaining % active.len();
        for (pos, &i) in active.iter().enumerate() {
            let want = share + usize::from(pos < extra);
            let take = want.min(counts[i] - quotas[i]);
            quotas[i] += take;
            remaining -= take;
        }
        active.retain(|&i| quotas[i] < counts[i]);
    }
    Ok(QuotaAllocation { quotas })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy herding without replacement. Returns candidate positions in
/// selection order; each step picks the candidate whose inclusion brings the
/// running mean closest to the mean of all candidates (earliest on ties).
pub fn herding_select(features: &[Vec<f64>], quota: usize) -> Result<Vec<usize>> {
    if quota > features.len() {
        return Err(Error::invalid(format!(
            "quota {quota} exceeds {} candidates",
            features.len()
        )));
    }
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let dim = first.len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        if f.len() != dim || f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("herding features must be finite and equally sized"));
        }
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut taken = vec![false; features.len()];
    let mut running = vec![0.0; dim];
    let mut order = Vec::with_capacity(quota);
    let mut candidate = vec![0.0; dim];
    for k in 1..=quota {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            for j in 0..dim {
                candidate[j] = (running[j] + f[j]) / k as f64;
            }
            let d = sq_dist(&mean, &candidate);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (pick, _) = best.expect("quota bounded by candidate count");
        taken[pick] = true;
        running.iter_mut().zip(&features[pick]).for_each(|(r, v)| *r += v);
        order.push(pick);
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    pub seed: u64,
    /// L2-normalize features before herding.
    pub normalize_features: bool,
}

/// The exemplar store `E_t`, grouped by target item in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub capacity: usize,
    pub groups: BTreeMap<usize, Vec<TrainingExample>>,
    pub created_cycle: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

impl ExemplarSet {
    pub fn empty(capacity: usize, strategy: SelectionStrategy, seed: u64) -> Self {
        Self {
            capacity,
            groups: BTreeMap::new(),
            created_cycle: 0,
            strategy,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingExample> {
        self.groups.values().flatten()
    }

    pub fn to_vec(&self) -> Vec<TrainingExample> {
        self.iter().cloned().collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# capacity={} cycle={} strategy={} seed={}\n",
            self.capacity,
            self.created_cycle,
            self.strategy.name(),
            self.seed
        );
        for ex in self.iter() {
            let prefix: Vec<String> = ex.prefix.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}\t{}", ex.target, prefix.join(" "));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_owned(),
            reason: reason.to_owned(),
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| bad("missing header"))?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("header entries must be key=value"))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("header field `{k}` missing or invalid")))
        };
        let mut set = ExemplarSet {
            capacity: num("capacity")? as usize,
            created_cycle: num("cycle")? as usize,
            seed: num("seed")?,
            strategy: fields.get("strategy").ok_or_else(|| bad("header field `strategy` missing"))?.parse()?,
            groups: BTreeMap::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let (target, prefix) = line.split_once('\t').ok_or_else(|| bad("expected `target<TAB>prefix`"))?;
            let target: usize = target.parse().map_err(|_| bad("bad target"))?;
            let prefix = prefix
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad prefix index")))
                .collect::<Result<Vec<usize>>>()?;
            set.groups.entry(target).or_default().push(TrainingExample::new(prefix, target));
        }
        Ok(set)
    }
}

fn herding_features(state: &ModelState, candidates: &[&TrainingExample], normalize: bool) -> Result<Vec<Vec<f64>>> {
    candidates
        .iter()
        .map(|ex| {
            let mut f = model::extract_features(state, &ex.prefix, None)?.0;
            if normalize {
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    f.iter_mut().for_each(|v| *v /= norm);
                }
            }
            Ok(f)
        })
        .collect()
}

/// Rebuilds the exemplar store from `pool` (current data plus previous
/// exemplars) under the trained model, in inference mode.
pub fn select_exemplars(
    state: &ModelState,
    pool: &[TrainingExample],
    capacity: usize,
    cfg: &SelectionConfig,
    cycle: usize,
) -> Result<ExemplarSet> {
    if pool.is_empty() {
        return Err(Error::invalid("empty exemplar pool"));
    }
    let item_count = state.item_count();
    let mut by_item: BTreeMap<usize, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in pool {
        if ex.target >= item_count {
            return Err(Error::IndexOutOfRange { index: ex.target, len: item_count });
        }
        by_item.entry(ex.target).or_default().push(ex);
    }
    let mut counts = vec![0; item_count];
    for (&item, group) in &by_item {
        counts[item] = group.len();
    }
    let quotas = match cfg.strategy {
        SelectionStrategy::EqualHerding => allocate_equal(&counts, capacity)?,
        _ => allocate_quota(&counts, capacity)?,
    };

    let mut groups = BTreeMap::new();
    for (item, candidates) in by_item {
        let quota = quotas.quotas[item];
        if quota == 0 {
            continue;
        }
        let picks: Vec<usize> = if quota == candidates.len() && cfg.strategy == SelectionStrategy::Random {
            (0..quota).collect()
        } else {
            match cfg.strategy {
                SelectionStrategy::Herding | SelectionStrategy::EqualHerding => {
                    herding_select(&herding_features(state, &candidates, cfg.normalize_features)?, quota)?
                }
                SelectionStrategy::Random => {
                    let mut idx: Vec<usize> = (0..candidates.len()).collect();
                    idx.shuffle(&mut rng::rng(cfg.seed, &[rng::tag("random-exemplars"), cycle as u64, item as u64]));
                    idx.truncate(quota);
                    idx
                }
                SelectionStrategy::Loss => {
                    let losses: Vec<f64> = candidates
                        .iter()
                        .map(|ex| Ok(losses::cross_entropy(&model::score(state, &ex.prefix, item_count)?, ex.target).0))
                        .collect::<Result<_>>()?;
                    let mut idx: Vec<usize> = (0..candidates.len()).collect();
                    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
                    idx.truncate(quota);
                    idx
                }
            }
        };
        groups.insert(item, picks.into_iter().map(|i| candidates[i].clone()).collect());
    }
    Ok(ExemplarSet {
        capacity,
        groups,
        created_cycle: cycle,
        strategy: cfg.strategy,
        seed: cfg.seed,
    })
}
