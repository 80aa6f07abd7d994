use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> ConfidenceInterval {
    if trials == 0 {
        return ConfidenceInterval { low: 0.0, high: 1.0 };
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ConfidenceInterval {
        low: (centre - half).max(0.0),
        high: (centre + half).min(1.0),
    }
}

/// Standard error of a proportion evaluated at a reference probability.
pub fn binomial_standard_error(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_contains_estimate() {
        let ci = wilson_interval(30, 100, Z95);
        assert!(ci.low < 0.3 && 0.3 < ci.high);
        // Reference values from the closed form evaluated by hand.
        assert!((ci.low - 0.2189).abs() < 1e-4, "{ci:?}");
        assert!((ci.high - 0.3958).abs() < 1e-4, "{ci:?}");
    }

    #[test]
    fn wilson_edges() {
        let all = wilson_interval(10, 10, Z95);
        assert!(all.high > 0.999_999);
        assert!(all.low > 0.6);
        let none = wilson_interval(0, 10, Z95);
        assert_eq!(none.low, 0.0);
    }
}
