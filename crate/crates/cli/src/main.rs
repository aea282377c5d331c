//! `hipergraph` command-line driver.
//!
//! Exit status: 0 on success, 1 on a usage or configuration error, 2 when a
//! pipeline stage fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hipergraph::config::RunConfig;
use hipergraph::pipeline::{Pipeline, StageOutcome};
use hipergraph::{par, Error};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "hipergraph", version, about = "Hierarchical perfusion-graph pipeline on synthetic tumour phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Rebuild artifacts even when an up-to-date or stale one exists.
    #[arg(long, global = true)]
    force: bool,

    /// Cap on worker threads (0 uses every core).
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    jobs: usize,

    /// Output directory for checkpoints, logs, metrics and maps.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Debug-level logs.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic cohort.
    GeneratePhantom,
    /// Train the curve VQ-VAE on training-split voxels.
    TrainVqvae,
    /// Build one hierarchical graph per case.
    BuildGraphs,
    /// Train the graph classifier with early stopping on validation AUC.
    TrainHgnn,
    /// Score the test split with bootstrap confidence intervals.
    Evaluate,
    /// Export gradient saliency maps for the test split.
    Saliency,
    /// Run every stage in order.
    RunAll,
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.paths.output_dir = o.clone();
    }
    let cfg = cfg.resolve_from_env();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn report(outcome: &StageOutcome) {
    let line = serde_json::json!({
        "stage": outcome.stage,
        "skipped": outcome.skipped,
        "details": outcome.details,
    });
    println!("{line}");
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg, cli.force).map_err(|e| Failure::Usage(e.to_string()))?;
    let command = cli.command;
    par::with_jobs(cli.jobs, move || -> hipergraph::Result<()> {
        pipeline.write_resolved_config()?;
        match command {
            Command::GeneratePhantom => report(&pipeline.generate_phantom()?),
            Command::TrainVqvae => report(&pipeline.train_vqvae()?),
            Command::BuildGraphs => report(&pipeline.build_graphs()?),
            Command::TrainHgnn => report(&pipeline.train_hgnn()?),
            Command::Evaluate => report(&pipeline.evaluate()?.0),
            Command::Saliency => report(&pipeline.saliency()?.0),
            Command::RunAll => {
                let summary = pipeline.run_all()?;
                for s in &summary.stages {
                    report(s);
                }
            }
        }
        Ok(())
    })
    .map_err(Failure::Pipeline)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default = if cli.verbose { "debug" } else { "info" };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            tracing::error!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            tracing::error!("{e}");
            ExitCode::from(2)
        }
    }
}
