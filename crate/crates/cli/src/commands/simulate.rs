use keytoken_core::simulator::{
    error_clustering_stats, intervention_experiment, simulate_batch, staircase_curve, AllocationStrategy, ClusterStats,
    CorrectnessCriterion, GenerationConfig, InterventionPlan,
};
use serde::{Deserialize, Serialize};

use super::{check_trials, finish, z_score};
use crate::config::{load, sim_error};
use crate::output::Artifacts;
use crate::{Cli, CliError, Command, Format, RunSummary};

fn default_trials() -> u64 {
    10_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaircaseParams {
    pub n_values: Vec<u64>,
    /// Trials per length; defaults to the batch trial count.
    #[serde(default)]
    pub trials: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionParams {
    pub budget: usize,
    pub reduction: f64,
    /// One rate per key token of `generation`.
    pub junction_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub generation: GenerationConfig,
    #[serde(default = "default_trials")]
    pub trials: u64,
    /// Emit per-position error frequencies.
    #[serde(default = "yes")]
    pub position_profile: bool,
    #[serde(default)]
    pub staircase: Option<StaircaseParams>,
    /// Persistence values for the clustering sweep.
    #[serde(default)]
    pub persistence_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub intervention: Option<InterventionParams>,
}

#[derive(Debug, Serialize)]
struct BatchRow {
    n: u64,
    key_count: u64,
    criterion: CorrectnessCriterion,
    trials: u64,
    successes: u64,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
    standard_error: f64,
    analytic: f64,
    z_score: Option<f64>,
    disrupted_rate: f64,
    union_bound: f64,
    base_seed: u64,
}

#[derive(Debug, Serialize)]
struct PositionRow {
    position: u64,
    wrong_trials: u64,
    error_frequency: f64,
}

#[derive(Debug, Serialize)]
struct StaircaseRow {
    n: u64,
    trials: u64,
    successes: u64,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
    analytic: f64,
    base_seed: u64,
}

#[derive(Debug, Serialize)]
struct ClusterRow {
    persistence: f64,
    trials: u64,
    lag1_autocorrelation: f64,
    mean_error_run_length: f64,
    independent_baseline_run_length: f64,
    error_rate: f64,
    wrong_tokens: u64,
    tokens: u64,
    base_seed: u64,
}

#[derive(Debug, Serialize)]
struct InterventionRow {
    strategy: AllocationStrategy,
    budget: usize,
    reduction: f64,
    chosen: String,
    analytic_success: f64,
    trials: u64,
    successes: u64,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
    base_seed: u64,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    model_label: String,
    batch: &'a BatchRow,
    clustering: Option<ClusterStats>,
    staircase: &'a [StaircaseRow],
    persistence_sweep: &'a [ClusterRow],
    intervention: &'a [InterventionRow],
}

pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    let mut config = load::<SimulateParams>(cli)?.config;
    if let Some(t) = cli.trials {
        config.params.trials = t;
    }
    let seed = config.seed;
    let p = &config.params;
    check_trials(p.trials, "params.trials")?;
    let gen = &p.generation;
    gen.validate().map_err(|e| sim_error("params.generation", e))?;

    let batch = simulate_batch(gen, p.trials, seed).map_err(|e| sim_error("params.generation", e))?;
    let analytic = gen.analytic_success();
    let interval = batch.interval();
    let batch_row = BatchRow {
        n: gen.n,
        key_count: gen.key_count(),
        criterion: gen.correctness_criterion,
        trials: batch.trials,
        successes: batch.successes,
        rate: batch.success_rate(),
        ci_low: interval.low,
        ci_high: interval.high,
        standard_error: batch.standard_error(),
        analytic,
        z_score: z_score(batch.success_rate(), analytic, batch.trials),
        disrupted_rate: batch.disrupted_rate(),
        union_bound: gen.key_rates().iter().sum::<f64>().min(1.0),
        base_seed: seed,
    };

    let mut staircase = Vec::new();
    if let Some(s) = &p.staircase {
        let trials = s.trials.unwrap_or(p.trials);
        check_trials(trials, "params.staircase.trials")?;
        let curve = staircase_curve(gen, &s.n_values, trials, seed).map_err(|e| match e {
            keytoken_core::simulator::SimError::Model(m) => CliError::config("params.staircase.n_values", m),
            other => sim_error("params.generation", other),
        })?;
        staircase = curve
            .points
            .iter()
            .map(|pt| StaircaseRow {
                n: pt.n,
                trials: pt.trials,
                successes: pt.successes,
                rate: pt.rate,
                ci_low: pt.interval.low,
                ci_high: pt.interval.high,
                analytic: pt.analytic,
                base_seed: pt.base_seed,
            })
            .collect();
    }

    let mut sweep = Vec::new();
    for (i, &persistence) in p.persistence_sweep.iter().flatten().enumerate() {
        let cfg = GenerationConfig { persistence, ..gen.clone() };
        let field = format!("params.persistence_sweep[{i}]");
        cfg.validate().map_err(|e| CliError::config(field.clone(), e))?;
        let stats = error_clustering_stats(&cfg, p.trials, seed)
            .map_err(|e| CliError::Runtime(format!("{field} (persistence {persistence}): {e}")))?;
        sweep.push(ClusterRow {
            persistence,
            trials: p.trials,
            lag1_autocorrelation: stats.lag1_autocorrelation,
            mean_error_run_length: stats.mean_error_run_length,
            independent_baseline_run_length: stats.independent_baseline_run_length,
            error_rate: stats.error_rate,
            wrong_tokens: stats.wrong_tokens,
            tokens: stats.tokens,
            base_seed: seed,
        });
    }

    let mut intervention = Vec::new();
    if let Some(iv) = &p.intervention {
        let plan = InterventionPlan {
            budget: iv.budget,
            reduction: iv.reduction,
            strategy: AllocationStrategy::GreedyByErrorRate,
            junction_rates: iv.junction_rates.clone(),
        };
        let cfg = GenerationConfig { junction_rates: None, ..gen.clone() };
        let results =
            intervention_experiment(&cfg, &plan, p.trials, seed).map_err(|e| sim_error("params.intervention", e))?;
        intervention = results
            .into_iter()
            .map(|r| InterventionRow {
                strategy: r.outcome.strategy,
                budget: iv.budget,
                reduction: iv.reduction,
                chosen: r.outcome.chosen.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" "),
                analytic_success: r.analytic_success,
                trials: r.trials,
                successes: r.successes,
                rate: r.rate,
                ci_low: r.interval.low,
                ci_high: r.interval.high,
                base_seed: seed,
            })
            .collect();
    }

    let mut artifacts = Artifacts::default();
    if config.wants(Format::Csv) {
        artifacts.csv("batch.csv", [&batch_row])?;
        if p.position_profile {
            let rows = batch.error_counts.iter().enumerate().map(|(i, &c)| PositionRow {
                position: i as u64 + 1,
                wrong_trials: c,
                error_frequency: c as f64 / batch.trials as f64,
            });
            artifacts.csv("positions.csv", rows)?;
        }
        if p.staircase.is_some() {
            artifacts.csv("staircase.csv", &staircase)?;
        }
        if p.persistence_sweep.is_some() {
            artifacts.csv("clustering.csv", &sweep)?;
        }
        if p.intervention.is_some() {
            artifacts.csv("intervention.csv", &intervention)?;
        }
    }
    if config.wants(Format::Json) {
        let report = Report {
            model_label: gen.model.label(),
            batch: &batch_row,
            clustering: batch.cluster_stats().ok(),
            staircase: &staircase,
            persistence_sweep: &sweep,
            intervention: &intervention,
        };
        artifacts.json("simulate.json", &report)?;
    }
    finish(Command::Simulate, &config, artifacts)
}
