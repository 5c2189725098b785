//! Command-line driver: data generation, source training, adaptation,
//! evaluation, ablations, sweeps and the verification suite.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "osda", version, about = "Source-free open-set domain adaptation experiments")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel runs for ablations and sweeps (overrides `jobs`).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic source, target and hidden-label CSVs.
    Generate,
    /// Train the source classifier and write its checkpoint.
    TrainSource {
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Adapt a source checkpoint using unlabeled target features only.
    Adapt {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Score predictions against hidden target labels.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<PathBuf>,
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
    },
    /// Compare pseudo-label only, consistency only and the full method.
    Ablate,
    /// Sweep the grids in the `sweep` block.
    Sweep,
    /// Run the gradient, information-theoretic and metric checks.
    Verify {
        /// Also run the training-based checks on the configured data.
        #[arg(long)]
        desk: bool,
    },
}

/// Loads the config, applies flag overrides and validates it.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::TrainSource { source } => commands::cmd_train_source(&cfg, source),
        Command::Adapt { checkpoint, target } => commands::cmd_adapt(&cfg, checkpoint, target),
        Command::Eval {
            predictions,
            hidden,
            pseudo_labels,
        } => commands::cmd_eval(&cfg, predictions, hidden, pseudo_labels).map(|_| ()),
        Command::Ablate => commands::cmd_ablate(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::Verify { desk } => commands::cmd_verify(&cfg, desk).map(|_| ()),
    }
}
