//! The four batch commands behind the CLI.
//!
//! Run directory layout:
//! `config.toml`, `train_log.tsv`, `cycle_reports.tsv`, `comparison.tsv`,
//! `summary.md`, `series.tsv`, `exemplars/`, optional `checkpoints/`, and a
//! `COMPLETE` marker written last. All files are byte-deterministic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{DataSource, RunConfig};
use crate::data::{self, CycleDataset};
use crate::harness::{self, MethodKind, MethodSpec, RunResult};
use crate::model;
use crate::report::{self, CycleRecord};
use crate::{Error, Result};

const COMPLETE: &str = "COMPLETE";

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub cycles: usize,
    pub examples: usize,
    pub items: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads or generates the cycles and writes them with the statistics table
/// and the item registry.
pub fn cmd_preprocess(source: &DataSource, out: &Path) -> Result<PreprocessSummary> {
    let loaded = source.load()?;
    data::write_datasets(out, &loaded.datasets)?;
    if let Some(registry) = &loaded.registry {
        data::write_registry(&out.join("items.tsv"), registry)?;
    }
    Ok(PreprocessSummary {
        cycles: loaded.datasets.len(),
        examples: loaded.datasets.iter().map(CycleDataset::example_count).sum(),
        items: loaded.datasets.last().map_or(0, |d| d.item_count_after),
    })
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub runs: usize,
    pub summary: String,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

fn run_all(cfg: &RunConfig, datasets: &[CycleDataset], methods: &[MethodSpec], workers: usize) -> Result<Vec<RunResult>> {
    pool(workers)?.install(|| harness::compare_methods(datasets, methods, &cfg.seeds, &cfg.train, &cfg.model))
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_run_dir(cfg: &RunConfig, out: &Path, results: &[RunResult]) -> Result<Vec<CycleRecord>> {
    create_dir(out)?;
    let marker = out.join(COMPLETE);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    write(&out.join("config.toml"), &cfg.to_toml())?;
    report::write_train_log(&out.join("train_log.tsv"), results)?;
    let text = report::render_cycle_records(&report::cycle_records(results));
    write(&out.join("cycle_reports.tsv"), &text)?;
    // fold over the records as written, so the tables are reproducible from the file
    let records = report::parse_cycle_records(&out.join("cycle_reports.tsv"), &text)?;
    let rows = report::summarize(&records);
    write(&out.join("comparison.tsv"), &report::render_comparison(&rows))?;
    write(&out.join("summary.md"), &report::render_summary(&rows))?;
    write(&out.join("series.tsv"), &report::render_series(&records))?;

    let exemplar_dir = out.join("exemplars");
    let checkpoint_dir = out.join("checkpoints");
    for r in results {
        let stem = format!("{}-seed{}", file_stem(&r.method.label), r.seed);
        if !r.exemplar_history.is_empty() {
            create_dir(&exemplar_dir)?;
        }
        for set in &r.exemplar_history {
            set.write(&exemplar_dir.join(format!("{stem}-cycle{}.txt", set.created_cycle)))?;
        }
        if !r.checkpoints.is_empty() {
            create_dir(&checkpoint_dir)?;
        }
        for (report, state) in r.reports.iter().zip(&r.checkpoints) {
            model::save_checkpoint(state, &checkpoint_dir.join(format!("{stem}-cycle{}.json", report.cycle_id)))?;
        }
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "runs\t{}", results.len());
    for r in results {
        let _ = writeln!(manifest, "{}\t{}\t{}", r.method.label, r.seed, r.reports.len());
    }
    write(&marker, &manifest)?;
    Ok(records)
}

/// Runs every configured method under every seed and writes the run directory.
pub fn cmd_run(cfg: &RunConfig, out: &Path, workers: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let loaded = cfg.data.load()?;
    let methods = cfg.method_specs();
    let results = run_all(cfg, &loaded.datasets, &methods, workers)?;
    let records = write_run_dir(cfg, out, &results)?;
    Ok(RunSummary {
        dir: out.to_owned(),
        runs: results.len(),
        summary: report::render_summary(&report::summarize(&records)),
    })
}

pub const ABLATION_KINDS: [MethodKind; 6] = [
    MethodKind::ErRandom,
    MethodKind::ErLoss,
    MethodKind::ErHerding,
    MethodKind::AderEqual,
    MethodKind::AderFix,
    MethodKind::Ader,
];

pub fn capacity_label(capacity: usize) -> String {
    format!("ADER@{capacity}")
}

/// The six ablation variants plus an ADER capacity sweep; the configured
/// method list is ignored, the method defaults apply.
pub fn ablation_methods(cfg: &RunConfig, datasets: &[CycleDataset]) -> Vec<MethodSpec> {
    let mut methods: Vec<MethodSpec> = ABLATION_KINDS.iter().map(|&k| cfg.method_defaults.spec(k)).collect();
    for capacity in cfg.ablation.resolve(datasets) {
        methods.push(MethodSpec {
            label: capacity_label(capacity),
            exemplar_capacity: capacity,
            ..cfg.method_defaults.spec(MethodKind::Ader)
        });
    }
    methods
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, workers: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let loaded = cfg.data.load()?;
    let methods = ablation_methods(cfg, &loaded.datasets);
    let mut seen: Vec<&str> = Vec::new();
    for m in &methods {
        if seen.contains(&m.label.as_str()) {
            return Err(Error::Config {
                field: "ablation.capacities".into(),
                reason: format!("duplicate capacity in `{}`", m.label),
            });
        }
        seen.push(&m.label);
    }
    let results = run_all(cfg, &loaded.datasets, &methods, workers)?;
    let records = write_run_dir(cfg, out, &results)?;
    let rows = report::summarize(&records);
    let (ablation, sweep): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| !r.method.starts_with("ADER@"));
    let doc = report::render_ablation(&ablation, &sweep);
    write(&out.join("ablation.md"), &doc)?;
    Ok(RunSummary {
        dir: out.to_owned(),
        runs: results.len(),
        summary: doc,
    })
}

/// Seed mean ± stdev summary of a finished run directory. Reads only; the
/// per-cycle series is written to `series_out` when given.
pub fn cmd_report(run_dir: &Path, series_out: Option<&Path>) -> Result<String> {
    for required in ["config.toml", "cycle_reports.tsv", COMPLETE] {
        if !run_dir.join(required).is_file() {
            return Err(Error::IncompleteRun {
                path: run_dir.to_owned(),
                missing: required.to_owned(),
            });
        }
    }
    let records = report::read_cycle_records(&run_dir.join("cycle_reports.tsv"))?;
    if records.is_empty() {
        return Err(Error::IncompleteRun {
            path: run_dir.to_owned(),
            missing: "cycle report rows".to_owned(),
        });
    }
    if let Some(path) = series_out {
        write(path, &report::render_series(&records))?;
    }
    Ok(report::render_summary(&report::summarize(&records)))
}
