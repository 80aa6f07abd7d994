//! Closed-form reliability of long generations.
//!
//! The naive model treats every token as failing independently at one rate,
//! giving `(1 - e)^n`. The two-rate model splits tokens into `k(n)` key tokens
//! failing at `e_key` and `n - k(n)` non-key tokens failing at a (possibly
//! position-dependent) rate `e_non(i)`:
//!
//! ```text
//! P(correct) = (1 - e_key)^k(n) * prod_{i = 1}^{n - k(n)} (1 - e_non(i))
//! ```
//!
//! All products are accumulated as sums of `ln_1p(-e)` terms so that lengths
//! in the millions stay accurate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{field}: {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("sequence length must be at least 1")]
    ZeroLength,
    #[error("n values must not be empty")]
    EmptyGrid,
    #[error("n values must be strictly increasing (found {prev} then {next})")]
    NotIncreasing { prev: u64, next: u64 },
}

fn check(field: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), ModelError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, value, range })
    }
}

fn check_probability(field: &'static str, value: f64) -> Result<(), ModelError> {
    check(field, value, (0.0..=1.0).contains(&value), "[0, 1]")
}

/// Growth law for the number of key tokens in a sequence of length `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KeyTokenGrowth {
    /// `k(n) = ceil(a * ln n)`
    Logarithmic { a: f64 },
    /// `k(n) = ceil(c * n^alpha)`
    PowerLaw { c: f64, alpha: f64 },
    /// `k(n) = min(k_max, ceil(ramp * n))`
    Bounded { k_max: u64, ramp: f64 },
    /// `k(n) = round(phi * n)`; `phi = 1` recovers the naive model.
    LinearFraction { phi: f64 },
}

/// Asymptotic shape of the reliability curve implied by a growth law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClass {
    PowerLawDecay,
    StretchedExponentialDecay,
    PlateauConstant,
    PureExponential,
}

impl KeyTokenGrowth {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            KeyTokenGrowth::Logarithmic { a } => check("growth.a", a, a > 0.0, "(0, inf)"),
            KeyTokenGrowth::PowerLaw { c, alpha } => {
                check("growth.c", c, c > 0.0, "(0, inf)")?;
                check("growth.alpha", alpha, alpha > 0.0 && alpha < 1.0, "(0, 1)")
            }
            KeyTokenGrowth::Bounded { k_max, ramp } => {
                if k_max == 0 {
                    return Err(ModelError::OutOfRange {
                        field: "growth.k_max",
                        value: 0.0,
                        range: "[1, inf)",
                    });
                }
                check("growth.ramp", ramp, ramp > 0.0, "(0, inf)")
            }
            KeyTokenGrowth::LinearFraction { phi } => {
                check("growth.phi", phi, phi > 0.0 && phi <= 1.0, "(0, 1]")
            }
        }
    }

    /// Number of key tokens among `n` tokens, clamped to `[0, n]`.
    pub fn key_count(&self, n: u64) -> u64 {
        if n == 0 {
            return 0;
        }
        let nf = n as f64;
        let raw = match *self {
            KeyTokenGrowth::Logarithmic { a } => (a * nf.ln()).ceil(),
            KeyTokenGrowth::PowerLaw { c, alpha } => (c * nf.powf(alpha)).ceil(),
            KeyTokenGrowth::Bounded { k_max, ramp } => (ramp * nf).ceil().min(k_max as f64),
            KeyTokenGrowth::LinearFraction { phi } => (phi * nf).round(),
        };
        if raw.is_nan() || raw <= 0.0 {
            0
        } else if raw >= nf {
            n
        } else {
            raw as u64
        }
    }

    pub fn decay_class(&self) -> DecayClass {
        match self {
            KeyTokenGrowth::Logarithmic { .. } => DecayClass::PowerLawDecay,
            KeyTokenGrowth::PowerLaw { .. } => DecayClass::StretchedExponentialDecay,
            KeyTokenGrowth::Bounded { .. } => DecayClass::PlateauConstant,
            KeyTokenGrowth::LinearFraction { .. } => DecayClass::PureExponential,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            KeyTokenGrowth::Logarithmic { a } => format!("logarithmic(a={a})"),
            KeyTokenGrowth::PowerLaw { c, alpha } => format!("power_law(c={c}, alpha={alpha})"),
            KeyTokenGrowth::Bounded { k_max, ramp } => format!("bounded(k_max={k_max}, ramp={ramp})"),
            KeyTokenGrowth::LinearFraction { phi } => format!("linear_fraction(phi={phi})"),
        }
    }
}

pub fn key_count(growth: &KeyTokenGrowth, n: u64) -> u64 {
    growth.key_count(n)
}

pub fn decay_class(growth: &KeyTokenGrowth) -> DecayClass {
    growth.decay_class()
}

/// Error rate of non-key tokens as a function of their (1-based) position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NonKeyDecay {
    Constant { e0: f64 },
    /// `e_non(i) = e0 * (1 + i / tau)^(-beta)`
    PowerDecay { e0: f64, tau: f64, beta: f64 },
}

impl NonKeyDecay {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            NonKeyDecay::Constant { e0 } => check_probability("non_key.e0", e0),
            NonKeyDecay::PowerDecay { e0, tau, beta } => {
                check_probability("non_key.e0", e0)?;
                check("non_key.tau", tau, tau > 0.0, "(0, inf)")?;
                check("non_key.beta", beta, beta > 0.0, "(0, inf)")
            }
        }
    }

    pub fn rate(&self, position: u64) -> f64 {
        match *self {
            NonKeyDecay::Constant { e0 } => e0,
            NonKeyDecay::PowerDecay { e0, tau, beta } => {
                e0 * (1.0 + position as f64 / tau).powf(-beta)
            }
        }
    }

    /// Upper bound of the rate over all positions `>= 1`.
    pub fn peak_rate(&self) -> f64 {
        self.rate(1)
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            NonKeyDecay::Constant { e0 } | NonKeyDecay::PowerDecay { e0, .. } => e0 == 0.0,
        }
    }

    /// `sum_{i = 1}^{count} ln(1 - e_non(i))`.
    pub fn log_survival(&self, count: u64) -> f64 {
        match *self {
            NonKeyDecay::Constant { e0 } => log_survival(e0, count),
            NonKeyDecay::PowerDecay { e0, .. } => {
                if e0 == 0.0 {
                    return 0.0;
                }
                let mut acc = 0.0;
                for i in 1..=count {
                    acc += (-self.rate(i)).ln_1p();
                }
                acc
            }
        }
    }
}

/// `count * ln(1 - e)`, with `0 * ln 0` taken as `0`.
pub(crate) fn log_survival(e: f64, count: u64) -> f64 {
    if count == 0 || e == 0.0 {
        0.0
    } else {
        count as f64 * (-e).ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoRateModel {
    pub e_key: f64,
    pub non_key: NonKeyDecay,
    pub growth: KeyTokenGrowth,
}

impl TwoRateModel {
    pub fn new(e_key: f64, non_key: NonKeyDecay, growth: KeyTokenGrowth) -> Result<Self, ModelError> {
        let model = TwoRateModel { e_key, non_key, growth };
        model.validate()?;
        Ok(model)
    }

    /// The naive model expressed as a two-rate model (every token is key).
    pub fn naive(e: f64) -> Result<Self, ModelError> {
        Self::new(
            e,
            NonKeyDecay::Constant { e0: 0.0 },
            KeyTokenGrowth::LinearFraction { phi: 1.0 },
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_probability("e_key", self.e_key)?;
        self.non_key.validate()?;
        self.growth.validate()?;
        if self.rate_ordering_violated() {
            tracing::warn!(
                e_key = self.e_key,
                e_non = self.non_key.peak_rate(),
                "key-token error rate is below the non-key rate"
            );
        }
        Ok(())
    }

    /// True when some non-key position has a higher error rate than key tokens.
    pub fn rate_ordering_violated(&self) -> bool {
        self.non_key.peak_rate() > self.e_key
    }

    pub fn with_e_key(&self, e_key: f64) -> Self {
        TwoRateModel { e_key, ..*self }
    }

    pub fn key_count(&self, n: u64) -> u64 {
        self.growth.key_count(n)
    }

    pub fn log_success(&self, n: u64) -> f64 {
        let k = self.key_count(n);
        log_survival(self.e_key, k) + self.non_key.log_survival(n - k)
    }

    pub fn label(&self) -> String {
        let non_key = match self.non_key {
            NonKeyDecay::Constant { e0 } => format!("constant(e0={e0})"),
            NonKeyDecay::PowerDecay { e0, tau, beta } => {
                format!("power_decay(e0={e0}, tau={tau}, beta={beta})")
            }
        };
        format!("two_rate(e_key={}, {}, {})", self.e_key, non_key, self.growth.label())
    }
}

pub fn naive_success_probability(e: f64, n: u64) -> f64 {
    log_survival(e, n).exp()
}

pub fn sequence_success_probability(model: &TwoRateModel, n: u64) -> f64 {
    model.log_success(n).exp()
}

/// Probability of at least one key-token error when key errors are independent.
pub fn any_disruptive_probability(model: &TwoRateModel, n: u64) -> f64 {
    disruptive_probability_for_count(model.e_key, model.key_count(n))
}

pub fn disruptive_probability_for_count(e_key: f64, k: u64) -> f64 {
    -log_survival(e_key, k).exp_m1()
}

/// `min(1, k(n) * e_key)`; holds with or without correlation between key errors.
pub fn disruptive_union_bound(model: &TwoRateModel, n: u64) -> f64 {
    union_bound_for_count(model.e_key, model.key_count(n))
}

pub fn union_bound_for_count(e_key: f64, k: u64) -> f64 {
    (k as f64 * e_key).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub points: Vec<CurvePoint>,
    pub model_label: String,
}

/// Lengths must be non-empty, positive and strictly increasing.
pub fn validate_grid(n_values: &[u64]) -> Result<(), ModelError> {
    if n_values.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    if n_values[0] == 0 {
        return Err(ModelError::ZeroLength);
    }
    for w in n_values.windows(2) {
        if w[1] <= w[0] {
            return Err(ModelError::NotIncreasing { prev: w[0], next: w[1] });
        }
    }
    Ok(())
}

pub fn reliability_curve(model: &TwoRateModel, n_values: &[u64]) -> Result<ReliabilityCurve, ModelError> {
    validate_grid(n_values)?;
    let points = n_values
        .iter()
        .map(|&n| CurvePoint { n, p: sequence_success_probability(model, n) })
        .collect();
    Ok(ReliabilityCurve { points, model_label: model.label() })
}

pub fn naive_curve(e: f64, n_values: &[u64]) -> Result<ReliabilityCurve, ModelError> {
    check_probability("e", e)?;
    validate_grid(n_values)?;
    let points = n_values
        .iter()
        .map(|&n| CurvePoint { n, p: naive_success_probability(e, n) })
        .collect();
    Ok(ReliabilityCurve { points, model_label: format!("naive(e={e})") })
}
