//! Command-line entry point: run, iuq, report, validate, and demo.
//!
//! Exit codes: 0 on success (including runs with recorded per-cell
//! failures), 1 on aborts such as unreadable configs or snapshot
//! mismatches, 2 on usage errors. Errors go to stderr as one JSON object
//! per line; help and results go to stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use uqharness::datasets::load_dataset;
use uqharness::demo::{report_dir, run_demo};
use uqharness::pipeline::{
    read_snapshot_config, run_stage1, run_stage2_iuq, ProviderRegistry, RunConfig,
};
use uqharness::promptkit::IuqLevel;
use uqharness::report::{run_report, GroupDim};

#[derive(Parser)]
#[command(
    name = "uqharness",
    about = "Elicit self-verbalized confidence from reasoning LLMs and measure its calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run stage-1 elicitation over models x datasets x strategies x efforts
    Run(RunArgs),
    /// Run stage-2 introspection over a finished stage-1 run
    Iuq(IuqArgs),
    /// Summarize a run directory into CSV/SVG artifacts
    Report(ReportArgs),
    /// Check a dataset file against the canonical line format
    Validate(ValidateArgs),
    /// Seeded end-to-end mock run; repeat runs are byte-identical
    Demo(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config (schema documented in the README)
    #[arg(long)]
    config: PathBuf,
    /// Continue an interrupted run directory instead of starting fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config's per-dataset item limit
    #[arg(long)]
    limit: Option<usize>,
    /// Override the config's worker count
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct IuqArgs {
    /// Run directory holding stage-1 records
    #[arg(long = "from-run")]
    from_run: PathBuf,
    /// Introspection conservativeness
    #[arg(long, value_enum)]
    level: LevelArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to summarize
    #[arg(long)]
    run: PathBuf,
    /// Output directory for the CSV/SVG artifacts
    #[arg(long, default_value = "report_out")]
    out: PathBuf,
    /// Number of equal-width confidence bins
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Comma-separated grouping dimensions for summary.csv
    #[arg(long = "group-by", default_value = "model,dataset,strategy,effort,stage,iuq_level")]
    group_by: String,
    /// Collapse one dimension by unweighted averaging
    #[arg(long)]
    aggregate: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset file to check
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Output directory for the demo run and report
    #[arg(long, default_value = "demo_out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Low,
    Medium,
    High,
}

impl From<LevelArg> for IuqLevel {
    fn from(level: LevelArg) -> Self {
        match level {
            LevelArg::Low => IuqLevel::Low,
            LevelArg::Medium => IuqLevel::Medium,
            LevelArg::High => IuqLevel::High,
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("{}", serde_json::json!({ "error": message, "kind": "usage" }));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(error)) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{error:#}") }));
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => run_command(args),
        Command::Iuq(args) => iuq_command(args),
        Command::Report(args) => report_command(args),
        Command::Validate(args) => validate_command(args),
        Command::Demo(args) => demo_command(args),
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    Ok(config)
}

fn run_command(args: RunArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.config)?;
    // Flag overrides merge into the config before it is snapshotted.
    if let Some(limit) = args.limit {
        config.per_dataset_limit = Some(limit);
    }
    if let Some(concurrency) = args.concurrency {
        config.concurrency = concurrency;
    }
    let resume = args.resume.is_some();
    if let Some(dir) = args.resume {
        config.run_dir = dir;
    }
    let registry = ProviderRegistry::from_config(&config)?;
    let outcome = run_stage1(&config, &registry, resume)?;
    println!(
        "run {} complete: {} scheduled, {} completed, {} format failures, {} errors, {} skipped \
         ({} requests issued this invocation)",
        outcome.run_id,
        outcome.counts.scheduled,
        outcome.counts.completed,
        outcome.counts.format_failures,
        outcome.counts.errors,
        outcome.counts.skipped,
        outcome.requests_issued,
    );
    println!("records: {}", outcome.run_dir.join("records.jsonl").display());
    Ok(())
}

fn iuq_command(args: IuqArgs) -> Result<(), CliError> {
    let config = read_snapshot_config(&args.from_run)
        .with_context(|| format!("cannot load run snapshot from {}", args.from_run.display()))?;
    let registry = ProviderRegistry::from_config(&config)?;
    let outcome = run_stage2_iuq(&args.from_run, args.level.into(), &config, &registry)?;
    println!(
        "introspection complete: {} records total, {} requests issued this invocation",
        outcome.counts.scheduled, outcome.requests_issued,
    );
    Ok(())
}

fn parse_dims(spec: &str) -> Result<Vec<GroupDim>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            GroupDim::parse(name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown dimension {name:?}; expected one of model, dataset, strategy, \
                     effort, stage, iuq_level"
                ))
            })
        })
        .collect()
}

fn report_command(args: ReportArgs) -> Result<(), CliError> {
    let dims = parse_dims(&args.group_by)?;
    if dims.is_empty() {
        return Err(CliError::Usage("--group-by needs at least one dimension".into()));
    }
    let aggregate = args
        .aggregate
        .as_deref()
        .map(|name| {
            GroupDim::parse(name)
                .ok_or_else(|| CliError::Usage(format!("unknown aggregate dimension {name:?}")))
        })
        .transpose()?;
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let paths = run_report(&args.run, &args.out, args.bins, &dims, aggregate)?;
    println!("summary: {}", paths.summary.display());
    if let Some(aggregated) = &paths.summary_aggregated {
        println!("aggregated: {}", aggregated.display());
    }
    println!("correlation: {}", paths.correlation.display());
    for (csv, svg) in &paths.reliability {
        println!("reliability: {} {}", csv.display(), svg.display());
    }
    for warning in &paths.warnings {
        eprintln!("{}", serde_json::json!({ "warning": warning }));
    }
    Ok(())
}

fn validate_command(args: ValidateArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset)?;
    println!(
        "ok: {} items, kind {}, id {}",
        dataset.items.len(),
        dataset.answer_kind.key(),
        dataset.id,
    );
    Ok(())
}

fn demo_command(args: DemoArgs) -> Result<(), CliError> {
    let (outcome, _report) = run_demo(&args.out)?;
    println!(
        "demo run {}: {} records ({} completed, {} format failures)",
        outcome.run_id,
        outcome.counts.scheduled,
        outcome.counts.completed,
        outcome.counts.format_failures,
    );
    println!("records: {}", outcome.run_dir.join("records.jsonl").display());
    println!("summary: {}", report_dir(&args.out).join("summary.csv").display());
    Ok(())
}
