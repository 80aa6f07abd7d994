use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{incidents_succeed, trial_rng, Engine, KeyLayout};
use super::{GenerationConfig, SimError};
use crate::ensemble::{selection_failure_probability, EnsembleSpec, SelectionRule};
use crate::stats::{binomial_standard_error, wilson_interval, ConfidenceInterval, Z95};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub m: u32,
    pub rule: SelectionRule,
    pub trials: u64,
    pub successes: u64,
    pub base_seed: u64,
}

impl EnsembleRun {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    pub fn interval(&self) -> ConfidenceInterval {
        wilson_interval(self.successes, self.trials, Z95)
    }

    pub fn standard_error(&self) -> f64 {
        binomial_standard_error(self.success_rate(), self.trials)
    }
}

/// Exact sequence-level success of the simulated ensemble.
///
/// A systematic event at any of the `k` key tokens sinks every sample; the
/// remaining per-sample failures are independent, so the sequence behaves
/// like a single decision with lifted `(s, q)`.
pub fn analytic_ensemble_success(config: &GenerationConfig, spec: &EnsembleSpec) -> f64 {
    let lifted = spec.decomposition.lift_to_sequence(config.key_count(), config.non_key_success());
    1.0 - selection_failure_probability(&EnsembleSpec { decomposition: lifted, ..*spec })
}

/// Simulates `m` samples per trial sharing one systematic-failure mask.
///
/// The key error rate comes from `spec.decomposition`; `config.model.e_key`
/// and `config.junction_rates` are not used.
pub fn simulate_ensemble(
    config: &GenerationConfig,
    spec: &EnsembleSpec,
    trials: u64,
    base_seed: u64,
) -> Result<EnsembleRun, SimError> {
    config.validate()?;
    spec.validate()?;
    if trials == 0 {
        return Err(SimError::NoTrials);
    }
    let k = config.key_count() as usize;
    let rates = vec![spec.decomposition.q; k];
    let fixed = KeyLayout::fixed(config, rates.clone());
    let criterion = config.correctness_criterion;

    let successes: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = base_seed.wrapping_add(t);
            let mut shared = trial_rng(seed, 0);
            let random_layout;
            let layout = match &fixed {
                Some(l) => l,
                None => {
                    random_layout = KeyLayout::random(config, rates.clone(), &mut shared);
                    &random_layout
                }
            };
            let mask: Vec<bool> = (0..k).map(|_| shared.random::<f64>() < spec.decomposition.s).collect();
            let engine = Engine::new(config, layout);
            let mut incidents = Vec::new();
            let mut failures = 0u32;
            for sample in 0..spec.m {
                let mut rng = trial_rng(seed, 1 + sample as u64);
                incidents.clear();
                engine.run(&mut rng, Some(&mask), &mut |inc| incidents.push(inc));
                if !incidents_succeed(&incidents, criterion) {
                    failures += 1;
                }
            }
            u64::from(!spec.rule.fails(spec.m, failures))
        })
        .sum();

    Ok(EnsembleRun { m: spec.m, rule: spec.rule, trials, successes, base_seed })
}
