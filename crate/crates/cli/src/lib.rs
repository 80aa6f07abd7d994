//! Batch driver for the `keytoken-core` models.
//!
//! Each subcommand reads a JSON config, computes its results in memory, then
//! writes the artifacts plus a `manifest.json` that can be passed back as
//! `--config` to reproduce the run byte for byte.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "keytoken-lab", version, about = "Key-token reliability models, simulations and corpus metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output formats; repeatable. Overrides the config list.
    #[arg(long = "format", value_enum, global = true)]
    pub formats: Vec<Format>,
    /// Monte Carlo trials; overrides the config value.
    #[arg(long, global = true)]
    pub trials: Option<u64>,
    /// Worker threads, 0 for one per core. Results do not depend on it.
    #[arg(long, global = true, env = "KEYTOKEN_LAB_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form reliability curves.
    Predict,
    /// Monte Carlo batches, staircases, clustering sweeps and interventions.
    Simulate,
    /// Ensemble selection: analytic tables and simulated comparison.
    Ensemble,
    /// Key-token metrics for a JSONL corpus.
    Analyze,
    /// Fit and rank growth regimes on success-vs-length observations.
    Fit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Predict => "predict",
            Command::Simulate => "simulate",
            Command::Ensemble => "ensemble",
            Command::Analyze => "analyze",
            Command::Fit => "fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config { field: field.into(), message: message.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Input { .. } => "input",
            CliError::Io { .. } => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Input { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Config { field, .. } => err["field"] = json!(field),
            CliError::Input { path, .. } | CliError::Io { path, .. } => err["path"] = json!(path),
            CliError::Runtime(_) => {}
        }
        json!({ "error": err })
    }
}

/// Files written by a successful run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Runs one command inside a dedicated thread pool.
pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(cli))
}
