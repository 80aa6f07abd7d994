use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{incidents_succeed, trial_rng, Engine, Incident, IncidentKind, KeyLayout};
use super::{CorrectnessCriterion, GenerationConfig, KeyPlacement, SimError};
use crate::model::{validate_grid, CurvePoint, ReliabilityCurve};
use crate::stats::{binomial_standard_error, wilson_interval, ConfidenceInterval, Z95};

/// Trials are split into at most this many chunks, independent of thread count.
const MAX_CHUNKS: u64 = 64;

/// Raw counters for the wrong-token indicator of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCounters {
    pub tokens: u64,
    pub wrong: u64,
    pub runs: u64,
    pub adjacent_wrong_pairs: u64,
    pub first_wrong: u64,
    pub last_wrong: u64,
}

impl ClusterCounters {
    fn merge(&mut self, other: &ClusterCounters) {
        self.tokens += other.tokens;
        self.wrong += other.wrong;
        self.runs += other.runs;
        self.adjacent_wrong_pairs += other.adjacent_wrong_pairs;
        self.first_wrong += other.first_wrong;
        self.last_wrong += other.last_wrong;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialBatch {
    pub n: u64,
    pub trials: u64,
    pub successes: u64,
    /// Trials with at least one disruptive error.
    pub disrupted: u64,
    pub base_seed: u64,
    pub criterion: CorrectnessCriterion,
    /// Number of trials in which each position (index 0 is position 1) was wrong.
    pub error_counts: Vec<u64>,
    pub clustering: ClusterCounters,
}

impl TrialBatch {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    pub fn interval(&self) -> ConfidenceInterval {
        wilson_interval(self.successes, self.trials, Z95)
    }

    pub fn standard_error(&self) -> f64 {
        binomial_standard_error(self.success_rate(), self.trials)
    }

    pub fn disrupted_rate(&self) -> f64 {
        self.disrupted as f64 / self.trials as f64
    }

    pub fn error_frequencies(&self) -> Vec<f64> {
        let t = self.trials as f64;
        self.error_counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn cluster_stats(&self) -> Result<ClusterStats, SimError> {
        ClusterStats::from_counters(&self.clustering, self.trials)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub lag1_autocorrelation: f64,
    pub mean_error_run_length: f64,
    /// Mean run length of independent errors at the same marginal rate, `1 / (1 - p)`.
    pub independent_baseline_run_length: f64,
    pub error_rate: f64,
    pub wrong_tokens: u64,
    pub tokens: u64,
}

impl ClusterStats {
    fn from_counters(c: &ClusterCounters, trials: u64) -> Result<Self, SimError> {
        if c.wrong < 2 {
            return Err(SimError::InsufficientErrors { observed: c.wrong });
        }
        if c.wrong == c.tokens {
            return Err(SimError::NoCorrectTokens);
        }
        let n_tok = c.tokens as f64;
        let wrong = c.wrong as f64;
        let mean = wrong / n_tok;
        // Lag pairs never straddle two trials.
        let pairs = (c.tokens - trials) as f64;
        let lead_sum = wrong - c.last_wrong as f64;
        let lag_sum = wrong - c.first_wrong as f64;
        let cov = (c.adjacent_wrong_pairs as f64 - mean * (lead_sum + lag_sum) + pairs * mean * mean) / pairs;
        let var = wrong * (1.0 - mean) / n_tok;
        let lag1 = if pairs > 0.0 { (cov / var).clamp(-1.0, 1.0) } else { 0.0 };
        Ok(ClusterStats {
            lag1_autocorrelation: lag1,
            mean_error_run_length: wrong / c.runs as f64,
            independent_baseline_run_length: 1.0 / (1.0 - mean),
            error_rate: mean,
            wrong_tokens: c.wrong,
            tokens: c.tokens,
        })
    }
}

struct Accumulator {
    successes: u64,
    disrupted: u64,
    // difference array over positions 1..=n+1
    diff: Vec<i64>,
    clustering: ClusterCounters,
    incidents: Vec<Incident>,
}

impl Accumulator {
    fn new(n: u64) -> Self {
        Accumulator {
            successes: 0,
            disrupted: 0,
            diff: vec![0; n as usize + 2],
            clustering: ClusterCounters::default(),
            incidents: Vec::new(),
        }
    }

    fn record(&mut self, n: u64, criterion: CorrectnessCriterion) {
        let incidents = &self.incidents;
        if incidents_succeed(incidents, criterion) {
            self.successes += 1;
        }
        if incidents.iter().any(|i| i.kind == IncidentKind::Disruptive) {
            self.disrupted += 1;
        }
        let c = &mut self.clustering;
        c.tokens += n;
        // incidents arrive sorted and disjoint; merge touching ones into runs
        let mut run_start = 0u64;
        let mut run_end = 0u64;
        let mut open = false;
        for inc in incidents {
            let end = inc.start + inc.len - 1;
            self.diff[inc.start as usize] += 1;
            self.diff[end as usize + 1] -= 1;
            c.wrong += inc.len;
            if open && inc.start == run_end + 1 {
                run_end = end;
            } else {
                if open {
                    close_run(c, run_start, run_end, n);
                }
                run_start = inc.start;
                run_end = end;
                open = true;
            }
        }
        if open {
            close_run(c, run_start, run_end, n);
        }
    }

    fn merge(mut self, other: Accumulator) -> Accumulator {
        self.successes += other.successes;
        self.disrupted += other.disrupted;
        for (a, b) in self.diff.iter_mut().zip(other.diff) {
            *a += b;
        }
        self.clustering.merge(&other.clustering);
        self
    }
}

fn close_run(c: &mut ClusterCounters, start: u64, end: u64, n: u64) {
    c.runs += 1;
    c.adjacent_wrong_pairs += end - start;
    if start == 1 {
        c.first_wrong += 1;
    }
    if end == n {
        c.last_wrong += 1;
    }
}

fn chunk_ranges(trials: u64) -> Vec<(u64, u64)> {
    let chunks = trials.min(MAX_CHUNKS);
    let size = trials.div_ceil(chunks);
    (0..chunks)
        .map(|c| (c * size, ((c + 1) * size).min(trials)))
        .filter(|(a, b)| a < b)
        .collect()
}

/// Runs `trials` independent generations; trial `t` is seeded with `base_seed + t`.
pub fn simulate_batch(config: &GenerationConfig, trials: u64, base_seed: u64) -> Result<TrialBatch, SimError> {
    config.validate()?;
    if trials == 0 {
        return Err(SimError::NoTrials);
    }
    let n = config.n;
    let rates = config.key_rates();
    let fixed = KeyLayout::fixed(config, rates.clone());
    let criterion = config.correctness_criterion;

    let acc = chunk_ranges(trials)
        .into_par_iter()
        .map(|(from, to)| {
            let mut acc = Accumulator::new(n);
            let mut random_layout;
            for t in from..to {
                let seed = base_seed.wrapping_add(t);
                let mut rng = trial_rng(seed, 0);
                let layout = match &fixed {
                    Some(l) => l,
                    None => {
                        random_layout = KeyLayout::random(config, rates.clone(), &mut rng);
                        &random_layout
                    }
                };
                acc.incidents.clear();
                let mut incidents = std::mem::take(&mut acc.incidents);
                Engine::new(config, layout).run(&mut rng, None, &mut |inc| incidents.push(inc));
                acc.incidents = incidents;
                acc.record(n, criterion);
            }
            acc
        })
        .reduce(|| Accumulator::new(n), Accumulator::merge);

    let mut running = 0i64;
    let error_counts = acc.diff[1..=n as usize]
        .iter()
        .map(|d| {
            running += d;
            running as u64
        })
        .collect();

    Ok(TrialBatch {
        n,
        trials,
        successes: acc.successes,
        disrupted: acc.disrupted,
        base_seed,
        criterion,
        error_counts,
        clustering: acc.clustering,
    })
}

/// Lag-1 autocorrelation and run lengths of the wrong-token indicator.
pub fn error_clustering_stats(config: &GenerationConfig, trials: u64, base_seed: u64) -> Result<ClusterStats, SimError> {
    simulate_batch(config, trials, base_seed)?.cluster_stats()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircasePoint {
    pub n: u64,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub interval: ConfidenceInterval,
    pub analytic: f64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCurve {
    pub curve: ReliabilityCurve,
    pub points: Vec<StaircasePoint>,
}

/// Empirical success rate per length. Length `i` of the grid uses base seed
/// `base_seed + i * trials` so no two lengths share trial seeds.
pub fn staircase_curve(
    template: &GenerationConfig,
    n_values: &[u64],
    trials: u64,
    base_seed: u64,
) -> Result<EmpiricalCurve, SimError> {
    validate_grid(n_values)?;
    if matches!(template.key_positions, KeyPlacement::Explicit { .. }) {
        return Err(SimError::InvalidConfig {
            field: "key_positions",
            message: "explicit positions cannot follow a length sweep".into(),
        });
    }
    if template.junction_rates.is_some() {
        return Err(SimError::InvalidConfig {
            field: "junction_rates",
            message: "per-junction rates cannot follow a length sweep".into(),
        });
    }
    let mut points = Vec::with_capacity(n_values.len());
    for (i, &n) in n_values.iter().enumerate() {
        let config = GenerationConfig { n, ..template.clone() };
        let seed = base_seed.wrapping_add((i as u64).wrapping_mul(trials));
        let batch = simulate_batch(&config, trials, seed)?;
        points.push(StaircasePoint {
            n,
            trials,
            successes: batch.successes,
            rate: batch.success_rate(),
            interval: batch.interval(),
            analytic: config.analytic_success(),
            base_seed: seed,
        });
    }
    let curve = ReliabilityCurve {
        points: points.iter().map(|p| CurvePoint { n: p.n, p: p.rate }).collect(),
        model_label: format!("empirical {}", template.model.label()),
    };
    Ok(EmpiricalCurve { curve, points })
}
