use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::split::build_cycle;
use super::{CycleDataset, ItemRegistry, SplitConfig, DEFAULT_MAX_SEQ_LEN};
use crate::{rng, Error, Result};

/// A drifting session stream.
///
/// Items belong to topics (`item % topic_count`). A session picks a topic from
/// the cycle's topic popularity, which rotates by `popularity_drift_rate` of a
/// full turn per cycle, then walks items of that topic: with probability
/// `transition_strength` it follows the current item's fixed successor,
/// otherwise it samples the topic's Zipf popularity. Fresh items get a
/// popularity boost in the cycle they are introduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStreamConfig {
    pub cycle_count: usize,
    pub sessions_per_cycle: usize,
    pub mean_session_length: f64,
    pub initial_vocab: usize,
    pub new_items_per_cycle: usize,
    pub popularity_drift_rate: f64,
    pub seed: u64,
    pub topic_count: usize,
    pub transition_strength: f64,
    pub topic_concentration: f64,
    pub zipf_exponent: f64,
    pub new_item_boost: f64,
    pub validation_fraction: f64,
    pub max_seq_len: usize,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            cycle_count: 8,
            sessions_per_cycle: 650,
            mean_session_length: 4.8,
            initial_vocab: 230,
            new_items_per_cycle: 10,
            popularity_drift_rate: 0.125,
            seed: 0,
            topic_count: 8,
            transition_strength: 0.6,
            topic_concentration: 4.0,
            zipf_exponent: 0.8,
            new_item_boost: 3.0,
            validation_fraction: 0.1,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cycle_count", self.cycle_count),
            ("sessions_per_cycle", self.sessions_per_cycle),
            ("initial_vocab", self.initial_vocab),
            ("topic_count", self.topic_count),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.mean_session_length.is_nan() || self.mean_session_length < 2.0 {
            return Err(Error::invalid("mean_session_length must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.popularity_drift_rate) {
            return Err(Error::invalid("popularity_drift_rate must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.transition_strength) {
            return Err(Error::invalid("transition_strength must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn item_count_at(&self, cycle: usize) -> usize {
        self.initial_vocab + self.new_items_per_cycle * cycle
    }
}

pub fn generate_synthetic_stream(
    cfg: &SyntheticStreamConfig,
) -> Result<(Vec<CycleDataset>, ItemRegistry)> {
    cfg.validate()?;
    let topics = cfg.topic_count;
    let mut registry = ItemRegistry::new();
    let mut rng = rng::rng(cfg.seed, &[rng::tag("synthetic")]);
    // per-topic item lists in introduction order, and each item's fixed successor
    let mut topic_items: Vec<Vec<usize>> = vec![Vec::new(); topics];
    let mut successor: Vec<usize> = Vec::new();
    let mut intro: Vec<usize> = Vec::new();

    let split = SplitConfig {
        validation_fraction: cfg.validation_fraction,
        max_seq_len: cfg.max_seq_len,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut datasets = Vec::with_capacity(cfg.cycle_count);
    for cycle in 0..cfg.cycle_count {
        let fresh = if cycle == 0 {
            cfg.initial_vocab
        } else {
            cfg.new_items_per_cycle
        };
        let first_new = registry.len();
        for _ in 0..fresh {
            let idx = registry.register(&format!("item{}", registry.len()));
            registry.mark_seen(idx, cycle);
            topic_items[idx % topics].push(idx);
            intro.push(cycle);
            successor.push(idx);
        }
        for idx in first_new..registry.len() {
            let pool = &topic_items[idx % topics];
            if pool.len() > 1 {
                loop {
                    let pick = pool[rng.gen_range(0..pool.len())];
                    if pick != idx {
                        successor[idx] = pick;
                        break;
                    }
                }
            }
        }

        let phase = cfg.popularity_drift_rate * cycle as f64;
        let topic_weights: Vec<f64> = (0..topics)
            .map(|k| {
                let angle = std::f64::consts::TAU * (k as f64 / topics as f64 - phase);
                (cfg.topic_concentration * angle.cos()).exp()
            })
            .collect();
        let topic_dist = WeightedIndex::new(&topic_weights).map_err(|e| Error::invalid(e.to_string()))?;
        let item_dists: Vec<Option<WeightedIndex<f64>>> = topic_items
            .iter()
            .map(|items| {
                let weights: Vec<f64> = items
                    .iter()
                    .enumerate()
                    .map(|(rank, &i)| {
                        let boost = if intro[i] == cycle && cycle > 0 { cfg.new_item_boost } else { 1.0 };
                        boost / ((rank + 1) as f64).powf(cfg.zipf_exponent)
                    })
                    .collect();
                WeightedIndex::new(&weights).ok()
            })
            .collect();

        let extra_mean = cfg.mean_session_length - 2.0;
        let stop = 1.0 / (extra_mean + 1.0);
        let max_len = (cfg.mean_session_length * 4.0).ceil() as usize;
        let mut sessions: Vec<Vec<usize>> = Vec::with_capacity(cfg.sessions_per_cycle);
        while sessions.len() < cfg.sessions_per_cycle {
            let topic = topic_dist.sample(&mut rng);
            let Some(dist) = &item_dists[topic] else { continue };
            let items = &topic_items[topic];
            let mut len = 2;
            while len < max_len && rng.gen::<f64>() >= stop {
                len += 1;
            }
            let mut session = Vec::with_capacity(len);
            session.push(items[dist.sample(&mut rng)]);
            while session.len() < len {
                let prev = *session.last().unwrap();
                let next = if rng.gen::<f64>() < cfg.transition_strength {
                    successor[prev]
                } else {
                    items[dist.sample(&mut rng)]
                };
                session.push(next);
            }
            sessions.push(session);
        }
        let views: Vec<&[usize]> = sessions.iter().map(Vec::as_slice).collect();
        datasets.push(build_cycle(cycle, &views, &registry, &split));
    }
    Ok((datasets, registry))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticStreamConfig {
        SyntheticStreamConfig {
            cycle_count: 4,
            sessions_per_cycle: 50,
            initial_vocab: 40,
            new_items_per_cycle: 5,
            ..Default::default()
        }
    }

    #[test]
    fn vocabulary_arithmetic() {
        let cfg = SyntheticStreamConfig {
            cycle_count: 8,
            sessions_per_cycle: 20,
            initial_vocab: 200,
            new_items_per_cycle: 10,
            ..Default::default()
        };
        let (cycles, reg) = generate_synthetic_stream(&cfg).unwrap();
        assert_eq!(cycles[7].item_count_after, 270);
        assert_eq!(reg.len(), 270);
        for c in &cycles {
            assert_eq!(c.item_count_after, cfg.item_count_at(c.cycle_id));
        }
    }

    #[test]
    fn no_new_items_keeps_vocabulary_constant() {
        let cfg = SyntheticStreamConfig { new_items_per_cycle: 0, popularity_drift_rate: 0.0, ..small() };
        let (cycles, _) = generate_synthetic_stream(&cfg).unwrap();
        assert!(cycles.iter().all(|c| c.item_count_after == 40));
        assert!(cycles.iter().all(|c| c.stats.new_item_actions == 0 || c.cycle_id == 0));
    }

    #[test]
    fn seed_determinism() {
        let a = generate_synthetic_stream(&small()).unwrap();
        let b = generate_synthetic_stream(&small()).unwrap();
        assert_eq!(a.0, b.0);
        let c = generate_synthetic_stream(&SyntheticStreamConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn examples_reference_known_items() {
        let (cycles, _) = generate_synthetic_stream(&small()).unwrap();
        for c in &cycles {
            assert_eq!(c.stats.sessions, 50);
            for e in c.all_examples() {
                assert!(e.target < c.item_count_after);
                assert!(!e.prefix.is_empty());
            }
        }
        assert!(cycles[1].stats.new_item_actions > 0);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic_stream(&SyntheticStreamConfig { popularity_drift_rate: 1.5, ..small() }).is_err());
        assert!(generate_synthetic_stream(&SyntheticStreamConfig { cycle_count: 0, ..small() }).is_err());
    }
}
