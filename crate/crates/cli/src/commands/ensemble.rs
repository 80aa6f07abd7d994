use keytoken_core::ensemble::{
    correction_factor, decomposition_from, effective_key_error, EnsembleSpec, ErrorDecomposition, SelectionRule,
};
use keytoken_core::simulator::{analytic_ensemble_success, simulate_ensemble, GenerationConfig};
use serde::{Deserialize, Serialize};

use super::{check_trials, finish, z_score};
use crate::config::{ensemble_error, load, sim_error};
use crate::output::{fmt_f64, Artifacts};
use crate::{Cli, CliError, Command, Format, RunSummary};

fn default_trials() -> u64 {
    20_000
}

fn yes() -> bool {
    true
}

fn default_m_values() -> Vec<u32> {
    vec![1, 3, 5, 7, 9]
}

fn default_rules() -> Vec<SelectionRule> {
    vec![SelectionRule::MajorityVote { tie_fails: true }, SelectionRule::OracleAnyCorrect]
}

fn default_limit_rhos() -> Vec<f64> {
    vec![0.0, 0.5, 0.999]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    /// Sequence shape; the key error rate comes from the decomposition.
    pub generation: GenerationConfig,
    /// Per-decision `(s, q)`. Give this or `rho`.
    #[serde(default)]
    pub decomposition: Option<ErrorDecomposition>,
    /// Correlation between samples at `generation.model.e_key`.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "default_m_values")]
    pub m_values: Vec<u32>,
    #[serde(default = "default_rules")]
    pub rules: Vec<SelectionRule>,
    /// Correlations for the correction-factor limit table.
    #[serde(default = "default_limit_rhos")]
    pub limit_rhos: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "yes")]
    pub simulate: bool,
}

#[derive(Debug, Serialize)]
struct AnalyticRow {
    m: u32,
    rule: String,
    s: f64,
    q: f64,
    rho: Option<f64>,
    single_key_error: f64,
    effective_key_error: f64,
    correction_factor: Option<f64>,
    sequence_success: f64,
}

#[derive(Debug, Serialize)]
struct LimitRow {
    rho: f64,
    m: u32,
    rule: String,
    s: f64,
    q: f64,
    correction_factor: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SimulatedRow {
    m: u32,
    rule: String,
    trials: u64,
    successes: u64,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
    analytic: f64,
    z_score: Option<f64>,
    base_seed: u64,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    decomposition: ErrorDecomposition,
    rho: Option<f64>,
    key_count: u64,
    analytic: &'a [AnalyticRow],
    limits: &'a [LimitRow],
    simulated: &'a [SimulatedRow],
}

fn spec(m: u32, d: ErrorDecomposition, rule: SelectionRule, field: &str) -> Result<EnsembleSpec, CliError> {
    EnsembleSpec::new(m, d, rule).map_err(|e| ensemble_error(field, e))
}

pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    let mut config = load::<EnsembleParams>(cli)?.config;
    if let Some(t) = cli.trials {
        config.params.trials = t;
    }
    let seed = config.seed;
    let p = &mut config.params;
    check_trials(p.trials, "params.trials")?;
    p.generation.validate().map_err(|e| sim_error("params.generation", e))?;
    let d = match (p.decomposition, p.rho) {
        (None, None) => return Err(CliError::config("params.decomposition", "required unless rho is given")),
        (Some(d), None) => {
            d.validate().map_err(|e| ensemble_error("params.decomposition", e))?;
            d
        }
        // A manifest carries both: rho as given and the decomposition it resolved to.
        (given, Some(rho)) => {
            let d = decomposition_from(p.generation.model.e_key, rho).map_err(|e| CliError::config("params.rho", e))?;
            if given.is_some_and(|g| g != d) {
                return Err(CliError::config(
                    "params.decomposition",
                    "does not match rho and generation.model.e_key; give only one of decomposition or rho",
                ));
            }
            p.decomposition = Some(d);
            d
        }
    };
    if p.m_values.is_empty() {
        return Err(CliError::config("params.m_values", "must not be empty"));
    }
    if p.rules.is_empty() {
        return Err(CliError::config("params.rules", "must not be empty"));
    }
    let p = &config.params;
    let rho = d.correlation().ok();
    let marginal = d.marginal();

    let mut analytic = Vec::new();
    for &m in &p.m_values {
        for (ri, &rule) in p.rules.iter().enumerate() {
            let s = spec(m, d, rule, &format!("params.rules[{ri}]"))?;
            analytic.push(AnalyticRow {
                m,
                rule: rule.label(),
                s: d.s,
                q: d.q,
                rho,
                single_key_error: marginal,
                effective_key_error: effective_key_error(&s),
                correction_factor: correction_factor(&s).ok(),
                sequence_success: analytic_ensemble_success(&p.generation, &s),
            });
        }
    }

    let mut limits = Vec::new();
    for (i, &r) in p.limit_rhos.iter().enumerate() {
        let ld = decomposition_from(marginal, r).map_err(|e| CliError::config(format!("params.limit_rhos[{i}]"), e))?;
        for &m in &p.m_values {
            for &rule in &p.rules {
                let s = spec(m, ld, rule, "params.rules")?;
                limits.push(LimitRow {
                    rho: r,
                    m,
                    rule: rule.label(),
                    s: ld.s,
                    q: ld.q,
                    correction_factor: correction_factor(&s).ok(),
                });
            }
        }
    }

    let mut simulated = Vec::new();
    if p.simulate {
        let gen = GenerationConfig { junction_rates: None, ..p.generation.clone() };
        for &m in &p.m_values {
            for &rule in &p.rules {
                let s = spec(m, d, rule, "params.rules")?;
                let run = simulate_ensemble(&gen, &s, p.trials, seed).map_err(|e| sim_error("params.generation", e))?;
                let expected = analytic_ensemble_success(&gen, &s);
                let interval = run.interval();
                simulated.push(SimulatedRow {
                    m,
                    rule: rule.label(),
                    trials: run.trials,
                    successes: run.successes,
                    rate: run.success_rate(),
                    ci_low: interval.low,
                    ci_high: interval.high,
                    analytic: expected,
                    z_score: z_score(run.success_rate(), expected, run.trials),
                    base_seed: seed,
                });
            }
        }
    }

    let mut artifacts = Artifacts::default();
    if config.wants(Format::Csv) {
        artifacts.csv("ensemble_analytic.csv", &analytic)?;
        artifacts.csv("correction_limits.csv", &limits)?;
        // One column per rule: effective key error at each ensemble size.
        let mut header = vec!["m".to_string()];
        header.extend(p.rules.iter().map(|r| r.label()));
        let rows: Vec<Vec<String>> = p
            .m_values
            .iter()
            .map(|&m| {
                let mut row = vec![m.to_string()];
                row.extend(
                    analytic.iter().filter(|a| a.m == m).map(|a| fmt_f64(a.effective_key_error)),
                );
                row
            })
            .collect();
        artifacts.csv_records("rule_comparison.csv", &header, &rows)?;
        if p.simulate {
            artifacts.csv("ensemble_simulated.csv", &simulated)?;
        }
    }
    if config.wants(Format::Json) {
        let report = Report {
            decomposition: d,
            rho,
            key_count: p.generation.key_count(),
            analytic: &analytic,
            limits: &limits,
            simulated: &simulated,
        };
        artifacts.json("ensemble.json", &report)?;
    }
    finish(Command::Ensemble, &config, artifacts)
}
