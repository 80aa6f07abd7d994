mod analyze;
mod ensemble;
mod fit;
mod predict;
mod simulate;

use serde::Serialize;

use crate::config::{out_dir, Manifest, RunConfig};
use crate::output::Artifacts;
use crate::{Cli, CliError, Command, RunSummary};

pub fn dispatch(cli: &Cli) -> Result<RunSummary, CliError> {
    match cli.command {
        Command::Predict => predict::run(cli),
        Command::Simulate => simulate::run(cli),
        Command::Ensemble => ensemble::run(cli),
        Command::Analyze => analyze::run(cli),
        Command::Fit => fit::run(cli),
    }
}

/// Appends the manifest and writes all artifacts.
fn finish<P: Serialize>(command: Command, config: &RunConfig<P>, mut artifacts: Artifacts) -> Result<RunSummary, CliError> {
    let manifest = Manifest::new(command, config, artifacts.names());
    artifacts.json("manifest.json", &manifest)?;
    let dir = out_dir(config);
    let files = artifacts.persist(&dir)?;
    tracing::info!(dir = %dir.display(), files = files.len(), "wrote results");
    Ok(RunSummary { out_dir: dir, files })
}

fn ignore_trials(cli: &Cli) {
    if cli.trials.is_some() {
        tracing::warn!(command = cli.command.name(), "--trials has no effect on this command");
    }
}

/// Standardized gap between an empirical rate and its closed-form value.
fn z_score(rate: f64, expected: f64, trials: u64) -> Option<f64> {
    let var = expected * (1.0 - expected) / trials as f64;
    (var > 0.0).then(|| (rate - expected) / var.sqrt())
}

fn check_trials(trials: u64, field: &str) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::config(field, "must be at least 1"));
    }
    Ok(())
}
