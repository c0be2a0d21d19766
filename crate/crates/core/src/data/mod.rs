//! Session logs, preprocessing, cycle splitting and synthetic streams.

mod ingest;
mod io;
mod preprocess;
mod split;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest, Delimiter, FormatDescriptor, Ingested};
pub use io::{read_datasets, read_registry, write_datasets, write_registry, write_stats_table};
pub use preprocess::{preprocess, sessions_to_events, FilterMode, PreprocessConfig, Preprocessed};
pub use split::{expand_session, split_cycles, SplitConfig};
pub use synthetic::{generate_synthetic_stream, SyntheticStreamConfig};

pub const DEFAULT_MAX_SEQ_LEN: usize = 50;

/// One click as read from a log file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub session_key: String,
    pub timestamp: i64,
    pub item_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<usize>,
    pub start_time: i64,
}

/// Append-only bijection between external item keys and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemRegistry {
    key_to_index: HashMap<String, usize>,
    index_to_key: Vec<String>,
    cycle_first_seen: Vec<Option<usize>>,
}

impl ItemRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `key`, assigning the next free one if unseen.
    pub fn register(&mut self, key: &str) -> usize {
        if let Some(&idx) = self.key_to_index.get(key) {
            return idx;
        }
        let idx = self.index_to_key.len();
        self.key_to_index.insert(key.to_owned(), idx);
        self.index_to_key.push(key.to_owned());
        self.cycle_first_seen.push(None);
        idx
    }

    pub fn len(&self) -> usize {
        self.index_to_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_key.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.key_to_index.get(key).copied()
    }

    pub fn key(&self, index: usize) -> Option<&str> {
        self.index_to_key.get(index).map(String::as_str)
    }

    pub fn first_seen(&self, index: usize) -> Option<usize> {
        self.cycle_first_seen.get(index).copied().flatten()
    }

    /// Records the first cycle an item appeared in; later calls keep the earliest.
    pub fn mark_seen(&mut self, index: usize, cycle: usize) {
        let slot = &mut self.cycle_first_seen[index];
        *slot = Some(slot.map_or(cycle, |c| c.min(cycle)));
    }

    /// Number of items first seen at or before `cycle`.
    pub fn count_through(&self, cycle: usize) -> usize {
        self.cycle_first_seen
            .iter()
            .filter(|c| matches!(c, Some(c) if *c <= cycle))
            .count()
    }

    pub(crate) fn from_parts(keys: Vec<String>, first_seen: Vec<Option<usize>>) -> Self {
        let key_to_index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Self {
            key_to_index,
            index_to_key: keys,
            cycle_first_seen: first_seen,
        }
    }
}

/// A (prefix, next item) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prefix: Vec<usize>,
    pub target: usize,
}

impl TrainingExample {
    pub fn new(prefix: Vec<usize>, target: usize) -> Self {
        Self { prefix, target }
    }
}

/// Table-1 style volume statistics of one cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleStats {
    pub sessions: usize,
    pub actions: usize,
    /// Actions on items whose first appearance is this cycle.
    pub new_item_actions: usize,
}

impl CycleStats {
    pub fn new_action_fraction(&self) -> f64 {
        if self.actions == 0 {
            0.0
        } else {
            self.new_item_actions as f64 / self.actions as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleDataset {
    pub cycle_id: usize,
    pub train: Vec<TrainingExample>,
    pub validation: Vec<TrainingExample>,
    /// Registry size once this cycle's items are in.
    pub item_count_after: usize,
    pub stats: CycleStats,
}

impl CycleDataset {
    pub fn all_examples(&self) -> impl Iterator<Item = &TrainingExample> {
        self.train.iter().chain(self.validation.iter())
    }

    pub fn example_count(&self) -> usize {
        self.train.len() + self.validation.len()
    }
}
