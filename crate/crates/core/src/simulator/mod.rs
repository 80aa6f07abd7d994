//! Monte Carlo simulation of generations with key and non-key tokens.
//!
//! Each token is one of four outcomes. Key tokens on the correct manifold
//! either pass or raise a [`TokenOutcome::DisruptiveError`], which moves the
//! trace onto a new manifold. Non-key tokens slip with probability
//! `e_non(i) * minor_error_rate` into a [`TokenOutcome::MinorError`] that stays
//! on the current manifold. After a disruption every token stays off-manifold
//! with probability `persistence`; otherwise, if recovery is enabled, the
//! trace returns to the home manifold and that token is drawn normally.
//!
//! Non-key slips use the non-key ordinal (the `i`-th non-key token, `i >= 1`)
//! as their decay position, the same indexing the closed form uses.
//!
//! Trial `t` of a batch is seeded with `base_seed + t` (wrapping). Ensemble
//! samples of a trial use separate ChaCha streams of that seed.

mod batch;
mod engine;
mod ensemble;
mod intervention;

pub use batch::{
    error_clustering_stats, simulate_batch, staircase_curve, ClusterCounters, ClusterStats, EmpiricalCurve, StaircasePoint,
    TrialBatch,
};
pub use engine::{simulate_sequence, SequenceTrace, TokenOutcome};
pub use ensemble::{analytic_ensemble_success, simulate_ensemble, EnsembleRun};
pub use intervention::{
    apply_intervention, greedy_allocation, intervention_experiment, AllocationStrategy, InterventionOutcome,
    InterventionPlan, StrategyResult,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::model::{ModelError, TwoRateModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("{field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("clustering needs at least 2 wrong tokens, observed {observed}")]
    InsufficientErrors { observed: u64 },
    #[error("clustering is undefined when every token is wrong")]
    NoCorrectTokens,
    #[error("budget {budget} exceeds the {junctions} available junctions")]
    BudgetExceedsJunctions { budget: usize, junctions: usize },
}

fn invalid(field: &'static str, message: impl Into<String>) -> SimError {
    SimError::InvalidConfig { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KeyPlacement {
    #[default]
    EvenlySpaced,
    UniformRandom,
    /// 1-based positions; junction `j` is the `j`-th smallest position.
    Explicit { positions: Vec<u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectnessCriterion {
    /// Every token must be correct; minor errors count.
    StrictAllTokens,
    /// Only key tokens must be correct; minor errors are tolerated.
    #[default]
    KeyTokensOnly,
}

fn default_minor_error_rate() -> f64 {
    1.0
}

fn default_recovery() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: u64,
    pub model: TwoRateModel,
    #[serde(default)]
    pub key_positions: KeyPlacement,
    #[serde(default = "default_minor_error_rate")]
    pub minor_error_rate: f64,
    #[serde(default)]
    pub persistence: f64,
    #[serde(default = "default_recovery")]
    pub recovery_enabled: bool,
    #[serde(default)]
    pub correctness_criterion: CorrectnessCriterion,
    /// Per-junction key error rates overriding `model.e_key`, one per key token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub junction_rates: Option<Vec<f64>>,
}

impl GenerationConfig {
    pub fn new(n: u64, model: TwoRateModel) -> Self {
        GenerationConfig {
            n,
            model,
            key_positions: KeyPlacement::EvenlySpaced,
            minor_error_rate: 1.0,
            persistence: 0.0,
            recovery_enabled: true,
            correctness_criterion: CorrectnessCriterion::KeyTokensOnly,
            junction_rates: None,
        }
    }

    pub fn key_count(&self) -> u64 {
        self.model.key_count(self.n)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(ModelError::ZeroLength.into());
        }
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.minor_error_rate) {
            return Err(invalid("minor_error_rate", format!("{} is outside [0, 1]", self.minor_error_rate)));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(invalid("persistence", format!("{} is outside [0, 1]", self.persistence)));
        }
        let k = self.key_count();
        if let KeyPlacement::Explicit { positions } = &self.key_positions {
            if positions.len() as u64 != k {
                return Err(invalid(
                    "key_positions.positions",
                    format!("expected {k} positions for n={}, got {}", self.n, positions.len()),
                ));
            }
            let mut sorted = positions.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid("key_positions.positions", "positions must be distinct"));
            }
            if sorted.first().is_some_and(|&p| p == 0) || sorted.last().is_some_and(|&p| p > self.n) {
                return Err(invalid("key_positions.positions", format!("positions must lie in [1, {}]", self.n)));
            }
        }
        if let Some(rates) = &self.junction_rates {
            if rates.len() as u64 != k {
                return Err(invalid("junction_rates", format!("expected {k} rates, got {}", rates.len())));
            }
            if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(invalid("junction_rates", format!("{bad} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Error rate of each key token, in position order.
    pub fn key_rates(&self) -> Vec<f64> {
        match &self.junction_rates {
            Some(rates) => rates.clone(),
            None => vec![self.model.e_key; self.key_count() as usize],
        }
    }

    /// Probability that every non-key token is accepted under the criterion.
    pub fn non_key_success(&self) -> f64 {
        match self.correctness_criterion {
            CorrectnessCriterion::KeyTokensOnly => 1.0,
            CorrectnessCriterion::StrictAllTokens => {
                let count = self.n - self.key_count();
                let scale = self.minor_error_rate;
                if scale == 0.0 || self.model.non_key.is_zero() {
                    return 1.0;
                }
                let mut acc = 0.0;
                match self.model.non_key {
                    crate::model::NonKeyDecay::Constant { e0 } => acc = crate::model::log_survival(scale * e0, count),
                    decay => {
                        for i in 1..=count {
                            acc += (-scale * decay.rate(i)).ln_1p();
                        }
                    }
                }
                acc.exp()
            }
        }
    }

    /// Closed-form success probability of one simulated trial.
    ///
    /// With uniform key rates, `StrictAllTokens` and `minor_error_rate = 1`
    /// this is exactly the two-rate formula.
    pub fn analytic_success(&self) -> f64 {
        let key: f64 = self.key_rates().iter().map(|&e| if e == 0.0 { 0.0 } else { (-e).ln_1p() }).sum();
        key.exp() * self.non_key_success()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sequence_success_probability, KeyTokenGrowth, NonKeyDecay};

    #[test]
    fn strict_analytic_matches_two_rate_formula() {
        let model = TwoRateModel::new(
            0.05,
            NonKeyDecay::PowerDecay { e0: 0.02, tau: 10.0, beta: 0.7 },
            KeyTokenGrowth::Logarithmic { a: 2.0 },
        )
        .unwrap();
        let mut cfg = GenerationConfig::new(500, model);
        cfg.correctness_criterion = CorrectnessCriterion::StrictAllTokens;
        let direct = sequence_success_probability(&model, 500);
        assert!((cfg.analytic_success() - direct).abs() < 1e-14);

        cfg.correctness_criterion = CorrectnessCriterion::KeyTokensOnly;
        let keys_only = sequence_success_probability(
            &TwoRateModel { non_key: NonKeyDecay::Constant { e0: 0.0 }, ..model },
            500,
        );
        assert!((cfg.analytic_success() - keys_only).abs() < 1e-14);
    }

    #[test]
    fn validation_catches_bad_layouts() {
        let model = TwoRateModel::new(0.1, NonKeyDecay::Constant { e0: 0.0 }, KeyTokenGrowth::Bounded { k_max: 3, ramp: 1.0 })
            .unwrap();
        let mut cfg = GenerationConfig::new(10, model);
        cfg.key_positions = KeyPlacement::Explicit { positions: vec![1, 2] };
        assert!(cfg.validate().is_err());
        cfg.key_positions = KeyPlacement::Explicit { positions: vec![1, 2, 2] };
        assert!(cfg.validate().is_err());
        cfg.key_positions = KeyPlacement::Explicit { positions: vec![1, 2, 11] };
        assert!(cfg.validate().is_err());
        cfg.key_positions = KeyPlacement::Explicit { positions: vec![10, 1, 2] };
        assert!(cfg.validate().is_ok());
        cfg.junction_rates = Some(vec![0.1, 0.2]);
        assert!(cfg.validate().is_err());
        cfg.junction_rates = Some(vec![0.1, 0.2, 1.2]);
        assert!(cfg.validate().is_err());
        cfg.junction_rates = None;
        cfg.persistence = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let cfg: GenerationConfig = serde_json::from_str(
            r#"{"n": 100, "model": {"e_key": 0.01, "non_key": {"type": "constant", "e0": 0.0},
                "growth": {"type": "linear_fraction", "phi": 1.0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.key_positions, KeyPlacement::EvenlySpaced);
        assert_eq!(cfg.correctness_criterion, CorrectnessCriterion::KeyTokensOnly);
        assert_eq!(cfg.minor_error_rate, 1.0);
        assert!(cfg.recovery_enabled);
    }
}
