use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ader::commands;
use ader::config::{DataSource, RunConfig};
use ader::data::{FormatDescriptor, PreprocessConfig, SplitConfig};
use ader::Error;

#[derive(Parser)]
#[command(name = "ader", version, about = "Continual training and evaluation of session recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a raw log (or generate a synthetic stream) into cycle datasets.
    Preprocess(PreprocessArgs),
    /// Run every configured method under every seed.
    Run(RunArgs),
    /// Run the ablation variants and the exemplar capacity sweep.
    Ablate(RunArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Run config whose `[data]` section names the source.
    #[arg(long, conflicts_with = "input")]
    config: Option<PathBuf>,
    /// Raw delimited event log, processed with default settings.
    #[arg(long, required_unless_present = "config")]
    input: Option<PathBuf>,
    /// Seed for the validation split or the synthetic generator.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Print the resolved data source and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Size of the method x seed worker pool.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ReportArgs {
    run_dir: PathBuf,
    /// Where to write the seed-averaged per-cycle series.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. })))
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<(RunConfig, Option<PathBuf>)> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if out.is_some() {
        cfg.out = out;
    }
    let out = cfg.out.clone();
    Ok((cfg, out))
}

fn require_out(out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    out.ok_or_else(|| {
        Error::Config {
            field: "out".into(),
            reason: "no output directory: pass --out or set `out`".into(),
        }
        .into()
    })
}

fn preprocess(args: PreprocessArgs) -> anyhow::Result<()> {
    let mut source = match (&args.config, &args.input) {
        (Some(path), _) => RunConfig::load(path)?.data,
        (None, Some(input)) => DataSource::Events {
            path: input.clone(),
            format: FormatDescriptor::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitConfig::default(),
        },
        (None, None) => unreachable!("clap requires one of --config/--input"),
    };
    if let Some(seed) = args.seed {
        source.set_seed(seed);
    }
    if args.dry_run {
        print!("{}", source.to_toml());
        return Ok(());
    }
    let summary = commands::cmd_preprocess(&source, &args.out)?;
    println!(
        "wrote {} cycles, {} examples, {} items to {}",
        summary.cycles,
        summary.examples,
        summary.items,
        args.out.display()
    );
    Ok(())
}

fn run(args: RunArgs, ablate: bool) -> anyhow::Result<()> {
    let (cfg, out) = load_config(&args.config, args.seed, args.out)?;
    cfg.validate()?;
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = require_out(out)?;
    let summary = if ablate {
        commands::cmd_ablate(&cfg, &out, args.workers)?
    } else {
        commands::cmd_run(&cfg, &out, args.workers)?
    };
    print!("{}", summary.summary);
    println!("{} runs written to {}", summary.runs, summary.dir.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    print!("{}", commands::cmd_report(&args.run_dir, args.out.as_deref())?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Run(a) => run(a, false),
        Command::Ablate(a) => run(a, true),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 1 } else { 2 })
        }
    }
}
