//! Flat per-cycle records and the tables folded from them. Raw records keep
//! full f64 precision (shortest round-trip form) so every summary number can
//! be recomputed from the files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::harness::RunResult;
use crate::{Error, Result};

pub const CYCLE_REPORTS_HEADER: &str = "method\tseed\tcycle\tk\trecall\tmrr\tunseen_fraction";
pub const TRAIN_LOG_HEADER: &str = "method\tseed\tcycle\tepoch\tce\tkd\treplay\tewc\tlambda_t\ttotal\tval_recall20";

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub method: String,
    pub seed: u64,
    pub cycle: usize,
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub unseen_fraction: f64,
}

pub fn cycle_records(results: &[RunResult]) -> Vec<CycleRecord> {
    let mut out = Vec::new();
    for r in results {
        for report in &r.reports {
            for (&k, &recall) in &report.recall_at {
                out.push(CycleRecord {
                    method: r.method.label.clone(),
                    seed: r.seed,
                    cycle: report.cycle_id,
                    k,
                    recall,
                    mrr: report.mrr_at[&k],
                    unseen_fraction: report.unseen_target_fraction,
                });
            }
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_cycle_records(records: &[CycleRecord]) -> String {
    let mut out = format!("{CYCLE_REPORTS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.method, r.seed, r.cycle, r.k, r.recall, r.mrr, r.unseen_fraction
        );
    }
    out
}

pub fn parse_cycle_records(path: &Path, text: &str) -> Result<Vec<CycleRecord>> {
    let bad = |line: usize, reason: &str| Error::Format {
        path: path.to_owned(),
        reason: format!("line {}: {reason}", line + 1),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CYCLE_REPORTS_HEADER => {}
        _ => return Err(bad(0, "unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 7 {
                return Err(bad(n, "expected 7 columns"));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(n, "bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            Ok(CycleRecord {
                method: c[0].to_owned(),
                seed: int(c[1])?,
                cycle: int(c[2])? as usize,
                k: int(c[3])? as usize,
                recall: real(c[4])?,
                mrr: real(c[5])?,
                unseen_fraction: real(c[6])?,
            })
        })
        .collect()
}

pub fn read_cycle_records(path: &Path) -> Result<Vec<CycleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cycle_records(path, &text)
}

pub fn write_train_log(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in results {
        for e in &r.epochs {
            let l = &e.losses;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.method.label, r.seed, e.cycle, e.epoch, l.ce, l.kd, l.replay, l.ewc, e.lambda_t, l.total, e.val_recall20
            );
        }
    }
    write(path, &out)
}

/// Methods in order of first appearance.
fn method_order(records: &[CycleRecord]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    order
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed mean and sample standard deviation of one method's cycle-averaged metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub k: usize,
    pub seeds: usize,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub mrr_mean: f64,
    pub mrr_std: f64,
}

/// Per seed, averages each metric over cycles (each cycle counts once), then
/// takes mean and standard deviation over seeds.
pub fn summarize(records: &[CycleRecord]) -> Vec<SummaryRow> {
    let mut per_seed: BTreeMap<(&str, usize, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = per_seed.entry((&r.method, r.k, r.seed)).or_default();
        e.0 += r.recall;
        e.1 += r.mrr;
        e.2 += 1;
    }
    let mut rows = Vec::new();
    for method in method_order(records) {
        let ks: Vec<usize> = {
            let mut ks: Vec<usize> = per_seed.keys().filter(|(m, ..)| *m == method).map(|&(_, k, _)| k).collect();
            ks.dedup();
            ks
        };
        for k in ks {
            let (recalls, mrrs): (Vec<f64>, Vec<f64>) = per_seed
                .iter()
                .filter(|((m, kk, _), _)| *m == method && *kk == k)
                .map(|(_, &(r, m, n))| (r / n as f64, m / n as f64))
                .unzip();
            let (recall_mean, recall_std) = mean_std(&recalls);
            let (mrr_mean, mrr_std) = mean_std(&mrrs);
            rows.push(SummaryRow {
                method: method.clone(),
                k,
                seeds: recalls.len(),
                recall_mean,
                recall_std,
                mrr_mean,
                mrr_std,
            });
        }
    }
    rows
}

pub fn render_comparison(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method\tk\tseeds\trecall_mean\trecall_std\tmrr_mean\tmrr_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.method, r.k, r.seeds, r.recall_mean, r.recall_std, r.mrr_mean, r.mrr_std
        );
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Markdown table: one row per method, `mean ± std` (percent) per metric.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = String::from("| method | seeds |");
    for k in &ks {
        let _ = write!(out, " Recall@{k} (%) |");
    }
    for k in &ks {
        let _ = write!(out, " MRR@{k} (%) |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(2 * ks.len()));
    out.push('\n');
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let mine: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == m).collect();
        let _ = write!(out, "| {m} | {} |", mine[0].seeds);
        for k in &ks {
            match mine.iter().find(|r| r.k == *k) {
                Some(r) => {
                    let _ = write!(out, " {} ± {} |", pct(r.recall_mean), pct(r.recall_std));
                }
                None => out.push_str(" - |"),
            }
        }
        for k in &ks {
            match mine.iter().find(|r| r.k == *k) {
                Some(r) => {
                    let _ = write!(out, " {} ± {} |", pct(r.mrr_mean), pct(r.mrr_std));
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Seed-averaged per-cycle metrics, one row per (method, cycle).
pub fn render_series(records: &[CycleRecord]) -> String {
    let mut ks: Vec<usize> = records.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut acc: BTreeMap<(&str, usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((&r.method, r.cycle, r.k)).or_default();
        e.0 += r.recall;
        e.1 += r.mrr;
        e.2 += 1;
    }
    let mut out = String::from("method\tcycle");
    for k in &ks {
        let _ = write!(out, "\trecall@{k}");
    }
    for k in &ks {
        let _ = write!(out, "\tmrr@{k}");
    }
    out.push('\n');
    for method in method_order(records) {
        let mut cycles: Vec<usize> = records.iter().filter(|r| r.method == method).map(|r| r.cycle).collect();
        cycles.sort_unstable();
        cycles.dedup();
        for c in cycles {
            let _ = write!(out, "{method}\t{c}");
            let cell = |k: usize, pick: fn(&(f64, f64, usize)) -> f64| {
                acc.get(&(method.as_str(), c, k))
                    .map_or("nan".to_owned(), |e| format!("{:.6}", pick(e) / e.2 as f64))
            };
            for &k in &ks {
                let _ = write!(out, "\t{}", cell(k, |e| e.0));
            }
            for &k in &ks {
                let _ = write!(out, "\t{}", cell(k, |e| e.1));
            }
            out.push('\n');
        }
    }
    out
}

/// Published Recall@20 values used as a qualitative reference.
pub const REFERENCE_ABLATION_RECALL20: [(&str, f64); 6] = [
    ("ER_RANDOM", 49.14),
    ("ER_LOSS", 49.31),
    ("ER_HERDING", 49.34),
    ("ADER_EQUAL", 49.92),
    ("ADER_FIX", 50.09),
    ("ADER", 50.21),
];
pub const REFERENCE_CAPACITY_RECALL20: [(&str, f64); 3] = [("10k", 49.59), ("20k", 50.05), ("30k", 50.21)];
pub const REFERENCE_BASELINE_RECALL20: [(&str, f64); 5] = [
    ("FINETUNE", 47.28),
    ("DROPOUT", 49.07),
    ("EWC", 47.66),
    ("JOINT", 50.03),
    ("ADER", 50.21),
];

fn reference_footer(title: &str, values: &[(&str, f64)]) -> String {
    let cells: Vec<String> = values.iter().map(|(k, v)| format!("{k} {v:.2}%")).collect();
    format!("{title}: {}.\n", cells.join(", "))
}

/// Ablation rows, the capacity sweep, and the published reference values.
pub fn render_ablation(ablation: &[SummaryRow], sweep: &[SummaryRow]) -> String {
    let mut out = String::from("# Ablation\n\n");
    out.push_str(&render_summary(ablation));
    out.push_str("\n# Exemplar capacity\n\n");
    out.push_str(&render_summary(sweep));
    out.push_str("\n---\nReference (DIGINETICA, Recall@20, full-scale; not reproducible at desk scale)\n\n");
    out.push_str(&reference_footer("- Ablation", &REFERENCE_ABLATION_RECALL20));
    out.push_str(&reference_footer("- ADER by exemplar count", &REFERENCE_CAPACITY_RECALL20));
    out.push_str(&reference_footer("- Baselines", &REFERENCE_BASELINE_RECALL20));
    out
}
