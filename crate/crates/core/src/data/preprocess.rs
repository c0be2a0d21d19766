use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ItemRegistry, RawEvent, Session};
use crate::{Error, Result};

/// How the item-support and session-length filters interact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Item filter on global pre-filter counts, then one session-length filter.
    #[default]
    SinglePass,
    /// Repeat both filters until nothing changes.
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_item_support: usize,
    pub min_session_length: usize,
    pub mode: FilterMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_item_support: 5,
            min_session_length: 2,
            mode: FilterMode::SinglePass,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Sorted by start time, ties by first appearance in the input.
    pub sessions: Vec<Session>,
    /// Indices assigned in order of first appearance across the sorted sessions.
    pub registry: ItemRegistry,
    /// Items under support on global counts (what the item filter removes).
    pub sub_support_items: usize,
    /// Items under support if counted after dropping length-1 sessions instead.
    pub sub_support_items_after_length_filter: usize,
}

struct RawSession<'a> {
    start_time: i64,
    items: Vec<&'a str>,
}

fn group_sessions(events: &[RawEvent]) -> Vec<RawSession<'_>> {
    let mut order: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<Vec<&RawEvent>> = Vec::new();
    for ev in events {
        let slot = *order.entry(ev.session_key.as_str()).or_insert_with(|| {
            grouped.push(Vec::new());
            grouped.len() - 1
        });
        grouped[slot].push(ev);
    }
    let mut sessions: Vec<RawSession> = grouped
        .into_iter()
        .map(|mut evs| {
            evs.sort_by_key(|e| e.timestamp);
            RawSession {
                start_time: evs[0].timestamp,
                items: evs.iter().map(|e| e.item_key.as_str()).collect(),
            }
        })
        .collect();
    // stable: equal start times keep first-appearance order
    sessions.sort_by_key(|s| s.start_time);
    sessions
}

fn count_items<'a>(sessions: &[RawSession<'a>]) -> HashMap<&'a str, usize> {
    let mut counts = HashMap::new();
    for item in sessions.iter().flat_map(|s| s.items.iter()) {
        *counts.entry(*item).or_insert(0) += 1;
    }
    counts
}

fn filter_once<'a>(
    sessions: Vec<RawSession<'a>>,
    counts: &HashMap<&'a str, usize>,
    cfg: &PreprocessConfig,
) -> Vec<RawSession<'a>> {
    sessions
        .into_iter()
        .map(|mut s| {
            s.items.retain(|i| counts[i] >= cfg.min_item_support);
            s
        })
        .filter(|s| s.items.len() >= cfg.min_session_length.max(1))
        .collect()
}

/// Drops rare items and short sessions, and registers the surviving items.
pub fn preprocess(events: &[RawEvent], cfg: &PreprocessConfig) -> Result<Preprocessed> {
    if events.is_empty() {
        return Err(Error::invalid("no events to preprocess"));
    }
    let grouped = group_sessions(events);
    let global = count_items(&grouped);
    let sub_support_items = global.values().filter(|&&c| c < cfg.min_item_support).count();
    let long_only: Vec<RawSession> = grouped
        .iter()
        .filter(|s| s.items.len() >= cfg.min_session_length.max(1))
        .map(|s| RawSession {
            start_time: s.start_time,
            items: s.items.clone(),
        })
        .collect();
    let sub_support_items_after_length_filter = count_items(&long_only)
        .values()
        .filter(|&&c| c < cfg.min_item_support)
        .count();
    log::info!(
        "items under support {}: {} on global counts, {} after length filter",
        cfg.min_item_support,
        sub_support_items,
        sub_support_items_after_length_filter
    );

    let mut sessions = filter_once(grouped, &global, cfg);
    if cfg.mode == FilterMode::FixedPoint {
        loop {
            let before: usize = sessions.iter().map(|s| s.items.len()).sum();
            let counts = count_items(&sessions);
            sessions = filter_once(sessions, &counts, cfg);
            if sessions.iter().map(|s| s.items.len()).sum::<usize>() == before {
                break;
            }
        }
    }
    if sessions.is_empty() {
        return Err(Error::AllFiltered);
    }

    let mut registry = ItemRegistry::new();
    let sessions = sessions
        .into_iter()
        .map(|s| Session {
            start_time: s.start_time,
            items: s.items.iter().map(|k| registry.register(k)).collect(),
        })
        .collect();
    Ok(Preprocessed {
        sessions,
        registry,
        sub_support_items,
        sub_support_items_after_length_filter,
    })
}

/// Turns sessions back into events (one second apart within a session).
pub fn sessions_to_events(sessions: &[Session], registry: &ItemRegistry) -> Vec<RawEvent> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(sid, s)| {
            s.items.iter().enumerate().map(move |(pos, &item)| RawEvent {
                session_key: format!("s{sid}"),
                timestamp: s.start_time + pos as i64,
                item_key: registry.key(item).unwrap_or_default().to_owned(),
            })
        })
        .collect()
}
