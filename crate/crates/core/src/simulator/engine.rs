use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorrectnessCriterion, GenerationConfig, KeyPlacement, SimError};
use crate::model::NonKeyDecay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOutcome {
    Correct,
    MinorError,
    DisruptiveError,
    OffManifoldContinuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IncidentKind {
    Minor,
    Disruptive,
    OffManifold,
}

/// A run of `len` wrong tokens of one kind starting at 1-based `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Incident {
    pub start: u64,
    pub len: u64,
    pub kind: IncidentKind,
}

pub(crate) fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in (0, 1].
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Number of failures before the first success of a Bernoulli(`p`) sequence.
fn geometric_failures(rng: &mut ChaCha8Rng, p: f64) -> u64 {
    if p >= 1.0 {
        return 0;
    }
    let g = (open_unit(rng).ln() / (-p).ln_1p()).floor();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g as u64
    }
}

/// Number of successive continuations when each one happens with probability `p`.
fn continuation_run(rng: &mut ChaCha8Rng, p: f64) -> u64 {
    if p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return u64::MAX;
    }
    let g = (open_unit(rng).ln() / p.ln()).floor();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g as u64
    }
}

/// Key token positions (sorted, 1-based) and their error rates.
#[derive(Debug, Clone)]
pub(crate) struct KeyLayout {
    pub positions: Vec<u64>,
    pub rates: Vec<f64>,
}

impl KeyLayout {
    /// Layout that does not depend on the trial seed, if the placement allows it.
    pub fn fixed(config: &GenerationConfig, rates: Vec<f64>) -> Option<KeyLayout> {
        let k = config.key_count();
        let n = config.n;
        let positions = match &config.key_positions {
            KeyPlacement::EvenlySpaced => (0..k).map(|j| 1 + ((j as u128 * n as u128) / k as u128) as u64).collect(),
            KeyPlacement::Explicit { positions } => {
                let mut p = positions.clone();
                p.sort_unstable();
                p
            }
            KeyPlacement::UniformRandom => return None,
        };
        Some(KeyLayout { positions, rates })
    }

    pub fn random(config: &GenerationConfig, rates: Vec<f64>, rng: &mut ChaCha8Rng) -> KeyLayout {
        let mut positions: Vec<u64> = index::sample(rng, config.n as usize, config.key_count() as usize)
            .into_iter()
            .map(|i| i as u64 + 1)
            .collect();
        positions.sort_unstable();
        KeyLayout { positions, rates }
    }
}

pub(crate) struct Engine<'a> {
    pub n: u64,
    pub non_key: NonKeyDecay,
    pub minor_error_rate: f64,
    pub persistence: f64,
    pub recovery_enabled: bool,
    pub layout: &'a KeyLayout,
}

impl<'a> Engine<'a> {
    pub fn new(config: &GenerationConfig, layout: &'a KeyLayout) -> Self {
        Engine {
            n: config.n,
            non_key: config.model.non_key,
            minor_error_rate: config.minor_error_rate,
            persistence: config.persistence,
            recovery_enabled: config.recovery_enabled,
            layout,
        }
    }

    fn slip_rate(&self, ordinal: u64) -> f64 {
        self.minor_error_rate * self.non_key.rate(ordinal)
    }

    /// Generates one sequence, reporting wrong-token runs in position order.
    ///
    /// `systematic[j]` forces key token `j` to fail regardless of its rate.
    pub fn run(&self, rng: &mut ChaCha8Rng, systematic: Option<&[bool]>, sink: &mut impl FnMut(Incident)) {
        let n = self.n;
        let keys = &self.layout.positions;
        let mut key_idx = 0usize;
        let mut pos = 1u64;
        while pos <= n {
            let next_key = keys.get(key_idx).copied().unwrap_or(n + 1);
            let seg_len = next_key - pos;
            if seg_len > 0 {
                // key_idx keys precede pos, so the first non-key ordinal here is pos - key_idx
                self.non_key_segment(rng, pos, pos - key_idx as u64, seg_len, sink);
            }
            if next_key > n {
                break;
            }
            let draw = rng.random::<f64>();
            let forced = systematic.is_some_and(|mask| mask[key_idx]);
            let failed = forced || draw < self.layout.rates[key_idx];
            key_idx += 1;
            if !failed {
                pos = next_key + 1;
                continue;
            }
            sink(Incident { start: next_key, len: 1, kind: IncidentKind::Disruptive });
            let start = next_key + 1;
            if start > n {
                break;
            }
            let remaining = n - start + 1;
            let run = if self.recovery_enabled {
                continuation_run(rng, self.persistence).min(remaining)
            } else {
                remaining
            };
            if run > 0 {
                sink(Incident { start, len: run, kind: IncidentKind::OffManifold });
            }
            pos = start + run;
            while key_idx < keys.len() && keys[key_idx] < pos {
                key_idx += 1;
            }
        }
    }

    fn non_key_segment(&self, rng: &mut ChaCha8Rng, pos: u64, ordinal: u64, len: u64, sink: &mut impl FnMut(Incident)) {
        // Thinning: candidates at the current (maximal) rate, accepted at the true rate.
        let mut j = 0u64;
        while j < len {
            let bound = self.slip_rate(ordinal + j);
            if bound <= 0.0 {
                return;
            }
            let gap = geometric_failures(rng, bound);
            if gap >= len - j {
                return;
            }
            j += gap;
            let rate = self.slip_rate(ordinal + j);
            if rate >= bound || rng.random::<f64>() * bound < rate {
                sink(Incident { start: pos + j, len: 1, kind: IncidentKind::Minor });
            }
            j += 1;
        }
    }
}

pub(crate) fn incidents_succeed(incidents: &[Incident], criterion: CorrectnessCriterion) -> bool {
    match criterion {
        CorrectnessCriterion::StrictAllTokens => incidents.is_empty(),
        CorrectnessCriterion::KeyTokensOnly => !incidents.iter().any(|i| i.kind == IncidentKind::Disruptive),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub outcomes: Vec<TokenOutcome>,
    pub manifold_ids: Vec<u64>,
    pub key_positions: Vec<u64>,
    pub seed: u64,
}

impl SequenceTrace {
    pub fn is_success(&self, criterion: CorrectnessCriterion) -> bool {
        match criterion {
            CorrectnessCriterion::StrictAllTokens => self.outcomes.iter().all(|o| *o == TokenOutcome::Correct),
            CorrectnessCriterion::KeyTokensOnly => self
                .key_positions
                .iter()
                .all(|&p| self.outcomes[(p - 1) as usize] == TokenOutcome::Correct),
        }
    }

    pub fn wrong_tokens(&self) -> usize {
        self.outcomes.iter().filter(|o| **o != TokenOutcome::Correct).count()
    }
}

fn materialize(n: u64, key_positions: Vec<u64>, incidents: &[Incident], seed: u64) -> SequenceTrace {
    let len = n as usize;
    let mut outcomes = vec![TokenOutcome::Correct; len];
    for inc in incidents {
        let kind = match inc.kind {
            IncidentKind::Minor => TokenOutcome::MinorError,
            IncidentKind::Disruptive => TokenOutcome::DisruptiveError,
            IncidentKind::OffManifold => TokenOutcome::OffManifoldContinuation,
        };
        let from = (inc.start - 1) as usize;
        outcomes[from..from + inc.len as usize].fill(kind);
    }

    // 0 is the home manifold; every disruption jumps to a fresh id and a
    // recovery returns home.
    let mut manifold_ids = vec![0u64; len];
    let mut current = 0u64;
    let mut next_id = 1u64;
    let mut off = false;
    for (i, outcome) in outcomes.iter().enumerate() {
        match outcome {
            TokenOutcome::DisruptiveError => {
                current = next_id;
                next_id += 1;
                off = true;
            }
            TokenOutcome::OffManifoldContinuation => {}
            _ if off => {
                current = 0;
                off = false;
            }
            _ => {}
        }
        manifold_ids[i] = current;
    }
    SequenceTrace { outcomes, manifold_ids, key_positions, seed }
}

/// Simulates one generation; identical `(config, seed)` give identical traces.
pub fn simulate_sequence(config: &GenerationConfig, seed: u64) -> Result<SequenceTrace, SimError> {
    config.validate()?;
    let mut rng = trial_rng(seed, 0);
    let rates = config.key_rates();
    let layout = match KeyLayout::fixed(config, rates.clone()) {
        Some(l) => l,
        None => KeyLayout::random(config, rates, &mut rng),
    };
    let mut incidents = Vec::new();
    Engine::new(config, &layout).run(&mut rng, None, &mut |inc| incidents.push(inc));
    Ok(materialize(config.n, layout.positions.clone(), &incidents, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeyTokenGrowth, TwoRateModel};

    fn config(n: u64, e_key: f64, e0: f64, growth: KeyTokenGrowth) -> GenerationConfig {
        GenerationConfig::new(n, TwoRateModel::new(e_key, NonKeyDecay::Constant { e0 }, growth).unwrap())
    }

    fn check_trace_invariants(trace: &SequenceTrace) {
        let mut prev_off = false;
        for (i, o) in trace.outcomes.iter().enumerate() {
            if *o == TokenOutcome::OffManifoldContinuation {
                assert!(prev_off, "continuation at {} without a preceding disruption", i + 1);
            }
            prev_off = matches!(o, TokenOutcome::DisruptiveError | TokenOutcome::OffManifoldContinuation);
        }
        for i in 1..trace.outcomes.len() {
            let changed = trace.manifold_ids[i] != trace.manifold_ids[i - 1];
            let disrupt = trace.outcomes[i] == TokenOutcome::DisruptiveError;
            let recovery = matches!(
                trace.outcomes[i - 1],
                TokenOutcome::DisruptiveError | TokenOutcome::OffManifoldContinuation
            ) && !matches!(trace.outcomes[i], TokenOutcome::OffManifoldContinuation);
            assert_eq!(changed, disrupt || recovery, "manifold change mismatch at {}", i + 1);
        }
    }

    #[test]
    fn noiseless_trace_is_all_correct() {
        let cfg = config(300, 0.0, 0.0, KeyTokenGrowth::Logarithmic { a: 3.0 });
        let trace = simulate_sequence(&cfg, 7).unwrap();
        assert_eq!(trace.outcomes.len(), 300);
        assert!(trace.outcomes.iter().all(|o| *o == TokenOutcome::Correct));
        assert!(trace.manifold_ids.iter().all(|&id| id == 0));
    }

    #[test]
    fn certain_key_error_hits_first_key() {
        let cfg = config(100, 1.0, 0.0, KeyTokenGrowth::Bounded { k_max: 5, ramp: 1.0 });
        let trace = simulate_sequence(&cfg, 1).unwrap();
        let first = trace.key_positions[0] as usize;
        assert_eq!(trace.outcomes[first - 1], TokenOutcome::DisruptiveError);
        assert!(trace.outcomes[..first - 1].iter().all(|o| *o == TokenOutcome::Correct));
    }

    #[test]
    fn absorbing_mode_after_disruption() {
        let mut cfg = config(200, 0.5, 0.0, KeyTokenGrowth::Bounded { k_max: 20, ramp: 1.0 });
        cfg.persistence = 1.0;
        cfg.recovery_enabled = false;
        for seed in 0..20 {
            let trace = simulate_sequence(&cfg, seed).unwrap();
            if let Some(first) = trace.outcomes.iter().position(|o| *o == TokenOutcome::DisruptiveError) {
                assert!(trace.outcomes[first + 1..].iter().all(|o| *o == TokenOutcome::OffManifoldContinuation));
                assert!(trace.manifold_ids[first..].iter().all(|&id| id == 1));
            }
            check_trace_invariants(&trace);
        }
    }

    #[test]
    fn no_recovery_is_absorbing_even_without_persistence() {
        let mut cfg = config(50, 1.0, 0.0, KeyTokenGrowth::Bounded { k_max: 1, ramp: 1.0 });
        cfg.persistence = 0.0;
        cfg.recovery_enabled = false;
        let trace = simulate_sequence(&cfg, 3).unwrap();
        assert_eq!(trace.outcomes[0], TokenOutcome::DisruptiveError);
        assert!(trace.outcomes[1..].iter().all(|o| *o == TokenOutcome::OffManifoldContinuation));
    }

    #[test]
    fn recovery_returns_home() {
        let mut cfg = config(2000, 0.3, 0.02, KeyTokenGrowth::PowerLaw { c: 2.0, alpha: 0.5 });
        cfg.persistence = 0.8;
        for seed in 0..50 {
            let trace = simulate_sequence(&cfg, seed).unwrap();
            check_trace_invariants(&trace);
            for (i, o) in trace.outcomes.iter().enumerate() {
                let off = matches!(o, TokenOutcome::DisruptiveError | TokenOutcome::OffManifoldContinuation);
                assert_eq!(off, trace.manifold_ids[i] != 0);
            }
        }
    }

    #[test]
    fn minor_errors_only_on_non_key_tokens() {
        let mut cfg = config(1000, 0.0, 0.2, KeyTokenGrowth::LinearFraction { phi: 0.1 });
        cfg.key_positions = KeyPlacement::UniformRandom;
        let trace = simulate_sequence(&cfg, 11).unwrap();
        assert_eq!(trace.key_positions.len(), 100);
        for &p in &trace.key_positions {
            assert_eq!(trace.outcomes[(p - 1) as usize], TokenOutcome::Correct);
        }
        let minors = trace.outcomes.iter().filter(|o| **o == TokenOutcome::MinorError).count();
        assert!(minors > 100 && minors < 260, "{minors}");
        assert!(trace.is_success(CorrectnessCriterion::KeyTokensOnly));
        assert!(!trace.is_success(CorrectnessCriterion::StrictAllTokens));
    }

    #[test]
    fn hidden_slips_are_not_emitted() {
        let mut cfg = config(1000, 0.0, 0.5, KeyTokenGrowth::Bounded { k_max: 1, ramp: 1.0 });
        cfg.minor_error_rate = 0.0;
        let trace = simulate_sequence(&cfg, 2).unwrap();
        assert_eq!(trace.wrong_tokens(), 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = config(5000, 0.1, 0.01, KeyTokenGrowth::Logarithmic { a: 5.0 });
        cfg.key_positions = KeyPlacement::UniformRandom;
        cfg.persistence = 0.5;
        let a = simulate_sequence(&cfg, 42).unwrap();
        let b = simulate_sequence(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_sequence(&cfg, 43).unwrap();
        assert_ne!(a.outcomes, c.outcomes);
    }

    #[test]
    fn evenly_spaced_layout_is_distinct_and_in_range() {
        for (n, phi) in [(10u64, 1.0), (1000, 0.09), (7, 0.5)] {
            let cfg = config(n, 0.1, 0.0, KeyTokenGrowth::LinearFraction { phi });
            let layout = KeyLayout::fixed(&cfg, cfg.key_rates()).unwrap();
            assert_eq!(layout.positions.len() as u64, cfg.key_count());
            assert!(layout.positions.windows(2).all(|w| w[0] < w[1]));
            assert!(layout.positions.iter().all(|&p| (1..=n).contains(&p)));
        }
    }

    #[test]
    fn power_decay_slips_follow_thinned_rate() {
        // Expected minor errors: sum over non-key ordinals of e_non(i).
        let decay = NonKeyDecay::PowerDecay { e0: 0.2, tau: 50.0, beta: 1.0 };
        let model = TwoRateModel::new(0.0, decay, KeyTokenGrowth::Bounded { k_max: 1, ramp: 1.0 }).unwrap();
        let cfg = GenerationConfig::new(2000, model);
        let expected: f64 = (1..2000u64).map(|i| decay.rate(i)).sum();
        let trials = 400;
        let total: usize = (0..trials).map(|s| simulate_sequence(&cfg, s).unwrap().wrong_tokens()).sum();
        let mean = total as f64 / trials as f64;
        // Poisson-binomial variance is below the mean.
        let se = (expected / trials as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "mean {mean} vs {expected}");
    }
}
