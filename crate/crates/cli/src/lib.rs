//! Command-line front end for the nowcasting pipeline:
//! `synth`/`ingest` → `correlate` → `train` → `predict` → `evaluate` → `report`.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plots;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::GradcheckArgs;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "ConvLSTM rainfall nowcasting on a 2x2 grid")]
pub struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset CSV and summarize it.
    Ingest { path: PathBuf },
    /// Generate a synthetic dataset from the synth_* settings.
    Synth,
    /// Correlation matrix of all variables.
    Correlate { data: Option<PathBuf> },
    /// Train a network and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict the training and test windows with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lead: Option<usize>,
    },
    /// Per-grid CC / NSE / NRMSE from predictions files.
    Evaluate { predictions: Vec<PathBuf> },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        layer1_filters: usize,
        #[arg(long, default_value_t = 2)]
        layer2_filters: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Table and per-grid plots from the predictions in a directory.
    Report { dir: Option<PathBuf> },
}

fn data_path<'a>(given: Option<&'a Path>, cfg: &'a RunConfig) -> Result<&'a Path> {
    given
        .or(cfg.data.as_deref())
        .context("no data file: pass one on the command line or set data in the config")
}

/// Runs one command and returns its summary. `progress` receives
/// per-epoch training lines.
pub fn run(cli: &Cli, progress: &mut dyn FnMut(&str)) -> Result<String> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .finish(cli.seed, cli.out.clone())?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;

    match &cli.command {
        Command::Ingest { path } => commands::ingest(&cfg, path),
        Command::Synth => commands::synth(&cfg),
        Command::Correlate { data } => commands::correlate(&cfg, data_path(data.as_deref(), &cfg)?),
        Command::Train { data } => commands::train(&cfg, data_path(data.as_deref(), &cfg)?, progress),
        Command::Predict { checkpoint, data, lead } => commands::predict(
            &cfg,
            checkpoint.as_deref(),
            data_path(data.as_deref(), &cfg)?,
            *lead,
        ),
        Command::Evaluate { predictions } => commands::evaluate(&cfg, predictions),
        Command::Gradcheck {
            layer1_filters,
            layer2_filters,
            steps,
            batch,
        } => commands::gradcheck(
            &cfg,
            GradcheckArgs {
                layer1_filters: *layer1_filters,
                layer2_filters: *layer2_filters,
                steps: *steps,
                batch: *batch,
                ..GradcheckArgs::default()
            },
        ),
        Command::Report { dir } => commands::report(&cfg, dir.as_deref()),
    }
}

/// An error chain flattened onto one line.
pub fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], "; ")
}
