//! Line-oriented text formats for cycle datasets and the item registry.
//!
//! `train.txt` / `validation.txt`: one example per line,
//! `cycle_id<TAB>prefix indices separated by spaces<TAB>target`.
//! `stats.tsv`: per-cycle volume table. `items.tsv`: `index key first_cycle`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CycleDataset, CycleStats, ItemRegistry, TrainingExample};
use crate::{Error, Result};

const STATS_HEADER: &str =
    "cycle\tsessions\tactions\tnew_item_actions\tnew_action_fraction\titem_count_after";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn format_examples<'a>(out: &mut String, cycle: usize, examples: impl Iterator<Item = &'a TrainingExample>) {
    for ex in examples {
        let prefix: Vec<String> = ex.prefix.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{cycle}\t{}\t{}", prefix.join(" "), ex.target);
    }
}

pub fn write_stats_table(path: &Path, datasets: &[CycleDataset]) -> Result<()> {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for d in datasets {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            d.cycle_id,
            d.stats.sessions,
            d.stats.actions,
            d.stats.new_item_actions,
            d.stats.new_action_fraction(),
            d.item_count_after
        );
    }
    write_file(path, &out)
}

pub fn write_datasets(dir: &Path, datasets: &[CycleDataset]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut train, mut val) = (String::new(), String::new());
    for d in datasets {
        format_examples(&mut train, d.cycle_id, d.train.iter());
        format_examples(&mut val, d.cycle_id, d.validation.iter());
    }
    write_file(&dir.join("train.txt"), &train)?;
    write_file(&dir.join("validation.txt"), &val)?;
    write_stats_table(&dir.join("stats.tsv"), datasets)
}

fn malformed(path: &Path, line: usize, what: &str) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: format!("line {}: {what}", line + 1),
    }
}

fn parse_examples(path: &Path) -> Result<Vec<(usize, TrainingExample)>> {
    let text = read_file(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut cols = line.split('\t');
            let (Some(cycle), Some(prefix), Some(target), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(malformed(path, n, "expected 3 tab-separated columns"));
            };
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| malformed(path, n, "bad integer"));
            let prefix = prefix
                .split_whitespace()
                .map(num)
                .collect::<Result<Vec<_>>>()?;
            if prefix.is_empty() {
                return Err(malformed(path, n, "empty prefix"));
            }
            Ok((num(cycle)?, TrainingExample::new(prefix, num(target)?)))
        })
        .collect()
}

pub fn read_datasets(dir: &Path) -> Result<Vec<CycleDataset>> {
    let stats_path = dir.join("stats.tsv");
    let stats = read_file(&stats_path)?;
    let mut datasets: Vec<CycleDataset> = Vec::new();
    for (n, line) in stats.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(malformed(&stats_path, n, "expected 6 columns"));
        }
        let num = |i: usize| cols[i].parse::<usize>().map_err(|_| malformed(&stats_path, n, "bad integer"));
        let cycle_id = num(0)?;
        if cycle_id != datasets.len() {
            return Err(malformed(&stats_path, n, "cycle ids must be consecutive from 0"));
        }
        datasets.push(CycleDataset {
            cycle_id,
            train: Vec::new(),
            validation: Vec::new(),
            item_count_after: num(5)?,
            stats: CycleStats {
                sessions: num(1)?,
                actions: num(2)?,
                new_item_actions: num(3)?,
            },
        });
    }
    for (file, is_train) in [("train.txt", true), ("validation.txt", false)] {
        let path = dir.join(file);
        for (cycle, ex) in parse_examples(&path)? {
            let d = datasets.get_mut(cycle).ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("cycle {cycle} missing from stats.tsv"),
            })?;
            if is_train { d.train.push(ex) } else { d.validation.push(ex) }
        }
    }
    Ok(datasets)
}

pub fn write_registry(path: &Path, registry: &ItemRegistry) -> Result<()> {
    let mut out = String::from("index\tkey\tfirst_cycle\n");
    for i in 0..registry.len() {
        let first = registry.first_seen(i).map_or_else(|| "-".to_owned(), |c| c.to_string());
        let _ = writeln!(out, "{i}\t{}\t{first}", registry.key(i).unwrap_or_default());
    }
    write_file(path, &out)
}

pub fn read_registry(path: &Path) -> Result<ItemRegistry> {
    let text = read_file(path)?;
    let mut keys = Vec::new();
    let mut seen = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols[0].parse::<usize>().ok() != Some(keys.len()) {
            return Err(malformed(path, n, "expected `index key first_cycle` with dense indices"));
        }
        keys.push(cols[1].to_owned());
        seen.push(cols[2].parse::<usize>().ok());
    }
    Ok(ItemRegistry::from_parts(keys, seen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_stream, SyntheticStreamConfig};

    #[test]
    fn datasets_and_registry_round_trip() {
        let cfg = SyntheticStreamConfig {
            cycle_count: 3,
            sessions_per_cycle: 30,
            initial_vocab: 20,
            new_items_per_cycle: 2,
            ..Default::default()
        };
        let (cycles, registry) = generate_synthetic_stream(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_datasets(dir.path(), &cycles).unwrap();
        write_registry(&dir.path().join("items.tsv"), &registry).unwrap();
        assert_eq!(read_datasets(dir.path()).unwrap(), cycles);
        assert_eq!(read_registry(&dir.path().join("items.tsv")).unwrap(), registry);
        let stats = std::fs::read_to_string(dir.path().join("stats.tsv")).unwrap();
        assert_eq!(stats.lines().count(), 1 + cycles.len());
    }

    #[test]
    fn malformed_example_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stats.tsv"), format!("{STATS_HEADER}\n0\t1\t2\t0\t0\t3\n")).unwrap();
        std::fs::write(dir.path().join("train.txt"), "0\t1 x\t2\n").unwrap();
        std::fs::write(dir.path().join("validation.txt"), "").unwrap();
        assert!(matches!(read_datasets(dir.path()), Err(Error::Format { .. })));
    }
}
