//! Budgeted error reduction at key-token junctions.
//!
//! A tool call or extra computation at junction `j` multiplies its error rate
//! by `reduction`. Greedy picks the riskiest junctions; the per-junction error
//! rate stands in for the entropy signal a live system would use.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::engine::trial_rng;
use super::{simulate_batch, GenerationConfig, SimError};
use crate::stats::ConfidenceInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationStrategy {
    /// Spreads the budget evenly: every junction gets `budget / k` of a full reduction.
    Uniform,
    RandomSubset,
    GreedyByErrorRate,
}

impl AllocationStrategy {
    pub const ALL: [AllocationStrategy; 3] =
        [AllocationStrategy::Uniform, AllocationStrategy::RandomSubset, AllocationStrategy::GreedyByErrorRate];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub budget: usize,
    pub reduction: f64,
    pub strategy: AllocationStrategy,
    pub junction_rates: Vec<f64>,
}

impl InterventionPlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..1.0).contains(&self.reduction) {
            return Err(SimError::InvalidConfig {
                field: "reduction",
                message: format!("{} is outside [0, 1)", self.reduction),
            });
        }
        if let Some(bad) = self.junction_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(SimError::InvalidConfig {
                field: "junction_rates",
                message: format!("{bad} is outside [0, 1]"),
            });
        }
        if self.budget > self.junction_rates.len() {
            return Err(SimError::BudgetExceedsJunctions {
                budget: self.budget,
                junctions: self.junction_rates.len(),
            });
        }
        Ok(())
    }
}

/// Indices of the `budget` largest junction rates, ties to the lowest index,
/// returned in ascending order.
pub fn greedy_allocation(plan: &InterventionPlan) -> Result<Vec<usize>, SimError> {
    plan.validate()?;
    let mut order: Vec<usize> = (0..plan.junction_rates.len()).collect();
    order.sort_by(|&a, &b| plan.junction_rates[b].total_cmp(&plan.junction_rates[a]).then(a.cmp(&b)));
    let mut chosen = order[..plan.budget].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub strategy: AllocationStrategy,
    /// Junctions that received a full reduction (empty for `Uniform`).
    pub chosen: Vec<usize>,
    pub rates: Vec<f64>,
}

impl InterventionOutcome {
    /// Probability that every junction passes.
    pub fn junction_success(&self) -> f64 {
        self.rates.iter().map(|e| 1.0 - e).product()
    }
}

/// Post-intervention junction rates under `strategy`. `RandomSubset` draws its
/// subset from `seed`.
pub fn apply_intervention(
    plan: &InterventionPlan,
    strategy: AllocationStrategy,
    seed: u64,
) -> Result<InterventionOutcome, SimError> {
    plan.validate()?;
    let k = plan.junction_rates.len();
    let mut rates = plan.junction_rates.clone();
    let chosen = match strategy {
        AllocationStrategy::GreedyByErrorRate => greedy_allocation(plan)?,
        AllocationStrategy::RandomSubset => {
            let mut rng = trial_rng(seed, u64::MAX);
            let mut picked = index::sample(&mut rng, k, plan.budget).into_vec();
            picked.sort_unstable();
            picked
        }
        AllocationStrategy::Uniform => {
            if k > 0 && plan.budget > 0 {
                let factor = if plan.budget == k {
                    plan.reduction
                } else {
                    1.0 - (1.0 - plan.reduction) * plan.budget as f64 / k as f64
                };
                rates.iter_mut().for_each(|r| *r *= factor);
            }
            Vec::new()
        }
    };
    for &j in &chosen {
        rates[j] *= plan.reduction;
    }
    Ok(InterventionOutcome { strategy, chosen, rates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub outcome: InterventionOutcome,
    pub analytic_success: f64,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub interval: ConfidenceInterval,
}

/// Simulates every strategy with common random numbers (same base seed).
pub fn intervention_experiment(
    config: &GenerationConfig,
    plan: &InterventionPlan,
    trials: u64,
    base_seed: u64,
) -> Result<Vec<StrategyResult>, SimError> {
    plan.validate()?;
    let k = config.key_count() as usize;
    if plan.junction_rates.len() != k {
        return Err(SimError::InvalidConfig {
            field: "junction_rates",
            message: format!("expected {k} junction rates for n={}, got {}", config.n, plan.junction_rates.len()),
        });
    }
    AllocationStrategy::ALL
        .iter()
        .map(|&strategy| {
            let outcome = apply_intervention(plan, strategy, base_seed)?;
            let cfg = GenerationConfig { junction_rates: Some(outcome.rates.clone()), ..config.clone() };
            let batch = simulate_batch(&cfg, trials, base_seed)?;
            Ok(StrategyResult {
                analytic_success: cfg.analytic_success(),
                trials,
                successes: batch.successes,
                rate: batch.success_rate(),
                interval: batch.interval(),
                outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeyTokenGrowth, NonKeyDecay, TwoRateModel};

    fn plan(rates: Vec<f64>, budget: usize) -> InterventionPlan {
        InterventionPlan { budget, reduction: 0.1, strategy: AllocationStrategy::GreedyByErrorRate, junction_rates: rates }
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_allocation(&plan(vec![0.1, 0.4, 0.2], 1)).unwrap(), vec![1]);
        assert!(greedy_allocation(&plan(vec![0.1, 0.4, 0.2], 0)).unwrap().is_empty());
        assert_eq!(greedy_allocation(&plan(vec![0.3, 0.1, 0.3, 0.3], 2)).unwrap(), vec![0, 2]);
        assert!(matches!(
            greedy_allocation(&plan(vec![0.1], 2)),
            Err(SimError::BudgetExceedsJunctions { budget: 2, junctions: 1 })
        ));
    }

    #[test]
    fn full_budget_makes_strategies_identical() {
        let p = plan(vec![0.1, 0.4, 0.2, 0.05], 4);
        let outcomes: Vec<_> = AllocationStrategy::ALL.iter().map(|&s| apply_intervention(&p, s, 3).unwrap()).collect();
        for o in &outcomes[1..] {
            assert_eq!(o.rates, outcomes[0].rates);
        }
    }

    #[test]
    fn random_subset_respects_budget() {
        let p = plan(vec![0.1; 12], 5);
        for seed in 0..20 {
            let o = apply_intervention(&p, AllocationStrategy::RandomSubset, seed).unwrap();
            assert_eq!(o.chosen.len(), 5);
            assert!(o.chosen.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn perfect_tools_leave_only_non_key_term() {
        let model = TwoRateModel::new(0.2, NonKeyDecay::Constant { e0: 0.01 }, KeyTokenGrowth::Bounded { k_max: 4, ramp: 1.0 })
            .unwrap();
        let mut cfg = GenerationConfig::new(40, model);
        cfg.correctness_criterion = super::super::CorrectnessCriterion::StrictAllTokens;
        let p = InterventionPlan { reduction: 0.0, ..plan(vec![0.2, 0.5, 0.3, 0.9], 4) };
        let results = intervention_experiment(&cfg, &p, 2000, 1).unwrap();
        let non_key = 0.99f64.powi(36);
        for r in &results {
            assert!(r.outcome.rates.iter().all(|&e| e == 0.0));
            assert!((r.analytic_success - non_key).abs() < 1e-12);
            let se = (non_key * (1.0 - non_key) / 2000.0).sqrt();
            assert!((r.rate - non_key).abs() < 4.0 * se);
        }
    }

    #[test]
    fn experiment_checks_junction_count() {
        let model = TwoRateModel::new(0.2, NonKeyDecay::Constant { e0: 0.0 }, KeyTokenGrowth::Bounded { k_max: 4, ramp: 1.0 })
            .unwrap();
        let cfg = GenerationConfig::new(40, model);
        assert!(intervention_experiment(&cfg, &plan(vec![0.1, 0.2], 1), 10, 0).is_err());
    }
}
