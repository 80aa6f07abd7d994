//! Multi-sample generation under a common-cause failure model.
//!
//! At each key decision a systematic event `S` (probability `s`) makes every
//! sample fail together; otherwise each sample fails on its own with
//! probability `q`. A selection rule then combines the `m` samples. The
//! failure probability of that rule is the effective key-token error rate, and
//! its ratio to the single-sample rate is the correction factor `f(rho, m)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TwoRateModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("{field}: {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("correlation is undefined when the marginal error rate is {marginal}")]
    UndefinedCorrelation { marginal: f64 },
    #[error("no decomposition with e_key={e_key} and rho={rho}: root search failed to bracket")]
    NoSolution { e_key: f64, rho: f64 },
    #[error("correction factor is undefined when the marginal error rate is 0")]
    ZeroMarginal,
}

fn check_unit(field: &'static str, value: f64) -> Result<(), EnsembleError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(EnsembleError::OutOfRange { field, value, range: "[0, 1]" })
    }
}

/// Systematic (`s`, shared by all samples) and idiosyncratic (`q`, per sample)
/// failure probabilities at a single key decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub s: f64,
    pub q: f64,
}

impl ErrorDecomposition {
    pub fn new(s: f64, q: f64) -> Result<Self, EnsembleError> {
        let d = ErrorDecomposition { s, q };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        check_unit("decomposition.s", self.s)?;
        check_unit("decomposition.q", self.q)
    }

    pub fn marginal(&self) -> f64 {
        marginal_key_error(self)
    }

    /// Probability that two given samples both fail.
    pub fn joint_failure(&self) -> f64 {
        self.s + (1.0 - self.s) * self.q * self.q
    }

    pub fn correlation(&self) -> Result<f64, EnsembleError> {
        correlation_of(self)
    }

    /// Decomposition of whole-sequence failure when every one of `k` key
    /// tokens draws its own systematic event and each sample must also
    /// survive its non-key tokens with probability `non_key_success`.
    pub fn lift_to_sequence(&self, k: u64, non_key_success: f64) -> ErrorDecomposition {
        let kf = k as f64;
        let no_systematic = if self.s == 0.0 { 1.0 } else { (kf * (-self.s).ln_1p()).exp() };
        let idio_survive = if self.q == 0.0 { 1.0 } else { (kf * (-self.q).ln_1p()).exp() };
        ErrorDecomposition {
            s: 1.0 - no_systematic,
            q: 1.0 - idio_survive * non_key_success,
        }
    }
}

pub fn marginal_key_error(d: &ErrorDecomposition) -> f64 {
    d.s + (1.0 - d.s) * d.q
}

/// Pearson correlation between the failure indicators of two samples.
pub fn correlation_of(d: &ErrorDecomposition) -> Result<f64, EnsembleError> {
    let e = marginal_key_error(d);
    if e <= 0.0 || e >= 1.0 {
        return Err(EnsembleError::UndefinedCorrelation { marginal: e });
    }
    Ok((d.joint_failure() - e * e) / (e * (1.0 - e)))
}

/// Inverts `(marginal_key_error, correlation_of)` by bisection on `s`.
pub fn decomposition_from(e_key: f64, rho: f64) -> Result<ErrorDecomposition, EnsembleError> {
    if !(e_key > 0.0 && e_key < 1.0) {
        return Err(EnsembleError::OutOfRange { field: "e_key", value: e_key, range: "(0, 1)" });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(EnsembleError::OutOfRange { field: "rho", value: rho, range: "[0, 1]" });
    }
    if rho == 0.0 {
        return Ok(ErrorDecomposition { s: 0.0, q: e_key });
    }
    if rho == 1.0 {
        return Ok(ErrorDecomposition { s: e_key, q: 0.0 });
    }

    let at = |s: f64| ErrorDecomposition { s, q: (e_key - s) / (1.0 - s) };
    let gap = |s: f64| correlation_of(&at(s)).map(|r| r - rho);

    let (mut lo, mut hi) = (0.0f64, e_key);
    let (g_lo, g_hi) = (gap(lo)?, gap(hi)?);
    if !(g_lo <= 0.0 && g_hi >= 0.0) {
        return Err(EnsembleError::NoSolution { e_key, rho });
    }
    // correlation is increasing in s along the constant-marginal curve
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SelectionRule {
    MajorityVote {
        #[serde(default = "default_tie_fails")]
        tie_fails: bool,
    },
    OracleAnyCorrect,
    ThresholdVote { required_fraction: f64 },
}

fn default_tie_fails() -> bool {
    true
}

impl SelectionRule {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        match *self {
            SelectionRule::ThresholdVote { required_fraction: f } if !(f > 0.0 && f <= 1.0) => {
                Err(EnsembleError::OutOfRange { field: "rule.required_fraction", value: f, range: "(0, 1]" })
            }
            _ => Ok(()),
        }
    }

    /// Whether the combined answer is wrong given `failures` wrong samples out of `m`.
    pub fn fails(&self, m: u32, failures: u32) -> bool {
        let correct = m - failures;
        match *self {
            SelectionRule::MajorityVote { tie_fails } => {
                2 * failures > m || (tie_fails && 2 * failures == m)
            }
            SelectionRule::OracleAnyCorrect => correct == 0,
            SelectionRule::ThresholdVote { required_fraction } => {
                (correct as f64) < required_correct(required_fraction, m)
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SelectionRule::MajorityVote { tie_fails: true } => "majority_vote".into(),
            SelectionRule::MajorityVote { tie_fails: false } => "majority_vote_ties_pass".into(),
            SelectionRule::OracleAnyCorrect => "oracle_any_correct".into(),
            SelectionRule::ThresholdVote { required_fraction } => format!("threshold_vote({required_fraction})"),
        }
    }
}

// The 1e-9 slack keeps fractions like 0.6 * 5 from rounding up to 4.
fn required_correct(fraction: f64, m: u32) -> f64 {
    (fraction * m as f64 - 1e-9).ceil().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub m: u32,
    pub decomposition: ErrorDecomposition,
    pub rule: SelectionRule,
}

impl EnsembleSpec {
    pub fn new(m: u32, decomposition: ErrorDecomposition, rule: SelectionRule) -> Result<Self, EnsembleError> {
        let spec = EnsembleSpec { m, decomposition, rule };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.m == 0 {
            return Err(EnsembleError::NoSamples);
        }
        self.decomposition.validate()?;
        self.rule.validate()
    }
}

/// Binomial(m, q) probability masses for 0..=m failures.
fn binomial_pmf(m: u32, q: f64) -> Vec<f64> {
    let m_us = m as usize;
    let mut pmf = vec![0.0; m_us + 1];
    if q <= 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    if q >= 1.0 {
        pmf[m_us] = 1.0;
        return pmf;
    }
    let (ln_q, ln_p) = (q.ln(), (-q).ln_1p());
    let mut ln_choose = 0.0;
    for f in 0..=m_us {
        if f > 0 {
            ln_choose += ((m_us - f + 1) as f64).ln() - (f as f64).ln();
        }
        pmf[f] = (ln_choose + f as f64 * ln_q + (m_us - f) as f64 * ln_p).exp();
    }
    pmf
}

/// Exact failure probability of the selection rule at one key decision.
pub fn selection_failure_probability(spec: &EnsembleSpec) -> f64 {
    let ErrorDecomposition { s, q } = spec.decomposition;
    if spec.rule == SelectionRule::OracleAnyCorrect {
        return (s + (1.0 - s) * q.powi(spec.m as i32)).clamp(0.0, 1.0);
    }
    let idiosyncratic: f64 = binomial_pmf(spec.m, q)
        .iter()
        .enumerate()
        .filter(|(f, _)| spec.rule.fails(spec.m, *f as u32))
        .map(|(_, p)| p)
        .sum();
    (s + (1.0 - s) * idiosyncratic).clamp(0.0, 1.0)
}

/// The ensemble's key-token error rate `f(rho, m) * e_key`.
pub fn effective_key_error(spec: &EnsembleSpec) -> f64 {
    selection_failure_probability(spec)
}

pub fn correction_factor(spec: &EnsembleSpec) -> Result<f64, EnsembleError> {
    let marginal = marginal_key_error(&spec.decomposition);
    if marginal == 0.0 {
        return Err(EnsembleError::ZeroMarginal);
    }
    Ok(effective_key_error(spec) / marginal)
}

/// Two-rate sequence success with every key decision resolved by the ensemble.
///
/// The model's own `e_key` is replaced by the effective rate; the non-key
/// term is untouched.
pub fn ensemble_sequence_success(model: &TwoRateModel, n: u64, spec: &EnsembleSpec) -> f64 {
    let effective = model.with_e_key(effective_key_error(spec));
    crate::model::sequence_success_probability(&effective, n)
}
