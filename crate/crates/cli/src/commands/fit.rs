use std::fs::File;
use std::path::PathBuf;

use keytoken_core::fitting::{select_model, FamilyFailure, FamilyKind, FitError, ModelFamily, ObservationSet};
use serde::{Deserialize, Serialize};

use super::{finish, ignore_trials};
use crate::config::{load, resolve};
use crate::output::Artifacts;
use crate::{Cli, CliError, Command, Format, RunSummary};

/// Labels the ranking as this tool's own procedure.
const PROTOCOL: &str = "AIC ranking of binomial maximum-likelihood fits (grid search plus coordinate descent, \
non-key rate fixed at 0); a tool-defined protocol for telling growth regimes apart";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitParams {
    /// CSV with header `n,trials,successes`; relative paths resolve against the config file.
    pub observations: PathBuf,
}

#[derive(Debug, Serialize)]
struct RankedFit {
    rank: usize,
    family: FamilyKind,
    params: ModelFamily,
    param_count: usize,
    log_likelihood: f64,
    aic: f64,
    delta_aic: f64,
    converged: bool,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct RankingRow {
    rank: usize,
    family: FamilyKind,
    params: String,
    param_count: usize,
    log_likelihood: f64,
    aic: f64,
    delta_aic: f64,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    protocol: &'static str,
    rows: usize,
    ranked: &'a [RankedFit],
    failures: &'a [FamilyFailure],
}

pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    ignore_trials(cli);
    let loaded = load::<FitParams>(cli)?;
    let mut config = loaded.config;
    config.params.observations = resolve(&loaded.base_dir, &config.params.observations);
    let path = config.params.observations.clone();

    let file = File::open(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let obs = ObservationSet::from_csv(file).map_err(|e: FitError| CliError::Input { path: path.clone(), message: e.to_string() })?;
    let ranking = select_model(&obs);
    let Some(best) = ranking.best() else {
        let detail: Vec<String> = ranking.failures.iter().map(|f| format!("{:?}: {}", f.family, f.error)).collect();
        return Err(CliError::Input { path, message: format!("no family could be fitted ({})", detail.join("; ")) });
    };
    let best_aic = best.aic;
    let ranked: Vec<RankedFit> = ranking
        .ranked
        .iter()
        .enumerate()
        .map(|(i, f)| RankedFit {
            rank: i + 1,
            family: f.family.kind(),
            params: f.family,
            param_count: f.param_count,
            log_likelihood: f.log_likelihood,
            aic: f.aic,
            delta_aic: f.aic - best_aic,
            converged: f.converged,
            iterations: f.iterations,
        })
        .collect();

    let mut artifacts = Artifacts::default();
    if config.wants(Format::Csv) {
        artifacts.csv(
            "ranking.csv",
            ranked.iter().map(|r| RankingRow {
                rank: r.rank,
                family: r.family,
                params: r.params.label(),
                param_count: r.param_count,
                log_likelihood: r.log_likelihood,
                aic: r.aic,
                delta_aic: r.delta_aic,
                converged: r.converged,
            }),
        )?;
    }
    if config.wants(Format::Json) {
        let report = Report { protocol: PROTOCOL, rows: obs.rows().len(), ranked: &ranked, failures: &ranking.failures };
        artifacts.json("fits.json", &report)?;
    }
    finish(Command::Fit, &config, artifacts)
}
