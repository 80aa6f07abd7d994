//! Maximum-likelihood fits of growth regimes to success-vs-length data.
//!
//! Every fitted family fixes the non-key rate at zero: with success counts
//! alone, non-key errors and key-count growth cannot be told apart.
//!
//! For any fixed key-count shape, the log-likelihood is concave in
//! `u = -ln(1 - e_key)`, so `e_key` is profiled out exactly by bisection on the
//! derivative. The shape parameters are searched by a coarse grid followed by
//! coordinate descent with step halving.

use std::collections::HashSet;
use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sequence_success_probability, KeyTokenGrowth, ModelError, NonKeyDecay, TwoRateModel};

pub const E_MIN: f64 = 1e-6;
pub const E_MAX: f64 = 0.999;
pub const SHAPE_MIN: f64 = 1e-4;
pub const SHAPE_MAX: f64 = 1e4;
pub const ALPHA_MIN: f64 = 0.05 + 1e-6;
pub const ALPHA_MAX: f64 = 0.95 - 1e-6;
pub const K_MAX_LIMIT: u64 = 1_000_000;
pub const PROB_CLAMP: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 200;
pub const RELATIVE_TOLERANCE: f64 = 1e-4;
/// AIC values closer than this are treated as tied.
pub const AIC_TIE_TOLERANCE: f64 = 1e-6;

const GRID_1D: usize = 60;
const GRID_2D: usize = 30;
const BISECTION_STEPS: usize = 64;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("observation row {row}: {message}")]
    InvalidRow { row: usize, message: String },
    #[error("duplicate n = {n} in observations")]
    DuplicateLength { n: u64 },
    #[error("no observation rows")]
    Empty,
    #[error("fitting needs at least 3 rows, got {rows}")]
    TooFewRows { rows: usize },
    #[error("degenerate data: every row has {0}")]
    DegenerateData(&'static str),
    #[error("fit for {family} did not converge")]
    Unconverged { family: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub n: u64,
    pub trials: u64,
    pub successes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationSet {
    rows: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(rows: Vec<Observation>) -> Result<Self, FitError> {
        if rows.is_empty() {
            return Err(FitError::Empty);
        }
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            let bad = |message: String| FitError::InvalidRow { row: i + 1, message };
            if r.n == 0 {
                return Err(bad("n must be positive".into()));
            }
            if r.trials == 0 {
                return Err(bad("trials must be positive".into()));
            }
            if r.successes > r.trials {
                return Err(bad(format!("successes {} exceed trials {}", r.successes, r.trials)));
            }
            if !seen.insert(r.n) {
                return Err(FitError::DuplicateLength { n: r.n });
            }
        }
        Ok(ObservationSet { rows })
    }

    /// Reads CSV with header `n,trials,successes`.
    pub fn from_csv(reader: impl Read) -> Result<Self, FitError> {
        let rows = csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<Result<Vec<Observation>, _>>()?;
        ObservationSet::new(rows)
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    /// Same lengths with every count multiplied by `factor`; pooling `factor`
    /// copies of each row.
    pub fn scaled(&self, factor: u64) -> ObservationSet {
        let rows = self
            .rows
            .iter()
            .map(|r| Observation { n: r.n, trials: r.trials * factor, successes: r.successes * factor })
            .collect();
        ObservationSet { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Naive,
    TwoRateBounded,
    TwoRateLog,
    TwoRatePower,
}

impl FamilyKind {
    /// Ranking order among otherwise tied fits.
    pub const ALL: [FamilyKind; 4] =
        [FamilyKind::Naive, FamilyKind::TwoRateBounded, FamilyKind::TwoRateLog, FamilyKind::TwoRatePower];

    pub fn param_count(self) -> usize {
        match self {
            FamilyKind::Naive => 1,
            FamilyKind::TwoRateLog | FamilyKind::TwoRateBounded => 2,
            FamilyKind::TwoRatePower => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelFamily {
    Naive { e: f64 },
    TwoRateLog { e_key: f64, a: f64 },
    TwoRatePower { e_key: f64, c: f64, alpha: f64 },
    TwoRateBounded { e_key: f64, k_max: u64 },
}

fn out_of_range(field: &'static str, value: f64, range: &'static str) -> ModelError {
    ModelError::OutOfRange { field, value, range }
}

impl ModelFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            ModelFamily::Naive { .. } => FamilyKind::Naive,
            ModelFamily::TwoRateLog { .. } => FamilyKind::TwoRateLog,
            ModelFamily::TwoRatePower { .. } => FamilyKind::TwoRatePower,
            ModelFamily::TwoRateBounded { .. } => FamilyKind::TwoRateBounded,
        }
    }

    pub fn error_rate(&self) -> f64 {
        match *self {
            ModelFamily::Naive { e } => e,
            ModelFamily::TwoRateLog { e_key, .. }
            | ModelFamily::TwoRatePower { e_key, .. }
            | ModelFamily::TwoRateBounded { e_key, .. } => e_key,
        }
    }

    fn growth(&self) -> KeyTokenGrowth {
        match *self {
            ModelFamily::Naive { .. } => KeyTokenGrowth::LinearFraction { phi: 1.0 },
            ModelFamily::TwoRateLog { a, .. } => KeyTokenGrowth::Logarithmic { a },
            ModelFamily::TwoRatePower { c, alpha, .. } => KeyTokenGrowth::PowerLaw { c, alpha },
            ModelFamily::TwoRateBounded { k_max, .. } => KeyTokenGrowth::Bounded { k_max, ramp: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let e = self.error_rate();
        if !(E_MIN..=E_MAX).contains(&e) {
            return Err(out_of_range("e_key", e, "[1e-6, 0.999]"));
        }
        match *self {
            ModelFamily::Naive { .. } => {}
            ModelFamily::TwoRateLog { a, .. } if !(a > 0.0 && a.is_finite()) => {
                return Err(out_of_range("a", a, "(0, inf)"));
            }
            ModelFamily::TwoRatePower { c, alpha, .. } => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(out_of_range("c", c, "(0, inf)"));
                }
                if !(alpha > 0.05 && alpha < 0.95) {
                    return Err(out_of_range("alpha", alpha, "(0.05, 0.95)"));
                }
            }
            ModelFamily::TwoRateBounded { k_max, .. } if !(1..=K_MAX_LIMIT).contains(&k_max) => {
                return Err(out_of_range("k_max", k_max as f64, "[1, 1e6]"));
            }
            _ => {}
        }
        Ok(())
    }

    /// The family as a two-rate model with no non-key errors.
    pub fn model(&self) -> TwoRateModel {
        TwoRateModel { e_key: self.error_rate(), non_key: NonKeyDecay::Constant { e0: 0.0 }, growth: self.growth() }
    }

    pub fn label(&self) -> String {
        match *self {
            ModelFamily::Naive { e } => format!("naive(e={e})"),
            ModelFamily::TwoRateLog { e_key, a } => format!("log(e_key={e_key}, a={a})"),
            ModelFamily::TwoRatePower { e_key, c, alpha } => format!("power(e_key={e_key}, c={c}, alpha={alpha})"),
            ModelFamily::TwoRateBounded { e_key, k_max } => format!("bounded(e_key={e_key}, k_max={k_max})"),
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binomial log-likelihood (without the combinatorial constant).
pub fn log_likelihood(family: &ModelFamily, obs: &ObservationSet) -> f64 {
    let model = family.model();
    obs.rows
        .iter()
        .map(|r| {
            let p = clamp_prob(sequence_success_probability(&model, r.n));
            r.successes as f64 * p.ln() + (r.trials - r.successes) as f64 * (-p).ln_1p()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: ModelFamily,
    pub param_count: usize,
    pub log_likelihood: f64,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Shape-only view of the data: per-row key counts with counts as floats.
struct Profile<'a> {
    obs: &'a ObservationSet,
    u_lo: f64,
    u_hi: f64,
}

impl<'a> Profile<'a> {
    fn new(obs: &'a ObservationSet) -> Self {
        Profile { obs, u_lo: -(-E_MIN).ln_1p(), u_hi: -(-E_MAX).ln_1p() }
    }

    fn loglik_u(&self, ks: &[u64], u: f64) -> f64 {
        self.obs
            .rows
            .iter()
            .zip(ks)
            .map(|(r, &k)| {
                let p = clamp_prob((-(k as f64) * u).exp());
                r.successes as f64 * p.ln() + (r.trials - r.successes) as f64 * (-p).ln_1p()
            })
            .sum()
    }

    fn slope(&self, ks: &[u64], u: f64) -> f64 {
        self.obs
            .rows
            .iter()
            .zip(ks)
            .filter(|(_, &k)| k > 0)
            .map(|(r, &k)| {
                let k = k as f64;
                k * ((r.trials - r.successes) as f64 / (k * u).exp_m1() - r.successes as f64)
            })
            .sum()
    }

    /// Best `e_key` for fixed key counts and the log-likelihood there.
    fn best(&self, ks: &[u64]) -> (f64, f64) {
        let (mut lo, mut hi) = (self.u_lo, self.u_hi);
        let u = if self.slope(ks, lo) <= 0.0 {
            lo
        } else if self.slope(ks, hi) >= 0.0 {
            hi
        } else {
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if self.slope(ks, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let e = (-(-u).exp_m1()).clamp(E_MIN, E_MAX);
        (e, self.loglik_u(ks, u))
    }

    fn evaluate(&self, growth: &KeyTokenGrowth) -> (f64, f64) {
        let ks: Vec<u64> = self.obs.rows.iter().map(|r| growth.key_count(r.n)).collect();
        self.best(&ks)
    }
}

/// Log-spaced points over `[lo, hi]`, endpoints included.
fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect()
}

fn lin_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

struct Search {
    best_x: Vec<f64>,
    best_e: f64,
    iterations: usize,
    converged: bool,
}

/// Grid then coordinate descent over continuous shape coordinates.
///
/// `to_growth` maps search coordinates to a growth law; `steps` are the
/// initial step sizes and `bounds` the box per coordinate. A step is retired
/// once it falls below `RELATIVE_TOLERANCE` times the coordinate magnitude.
fn coordinate_search(
    profile: &Profile,
    grid: Vec<Vec<f64>>,
    bounds: &[(f64, f64)],
    mut steps: Vec<f64>,
    to_growth: impl Fn(&[f64]) -> KeyTokenGrowth,
) -> Search {
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for x in grid {
        let (e, ll) = profile.evaluate(&to_growth(&x));
        if best.as_ref().is_none_or(|b| ll > b.2) {
            best = Some((x, e, ll));
        }
    }
    let (mut x, mut e, mut ll) = best.expect("non-empty grid");
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        if steps.iter().zip(&x).all(|(s, v)| *s <= RELATIVE_TOLERANCE * v.abs().max(1.0)) {
            converged = true;
            break;
        }
        iterations += 1;
        for d in 0..x.len() {
            let mut improved = false;
            for dir in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[d] = (x[d] + dir * steps[d]).clamp(bounds[d].0, bounds[d].1);
                if trial[d] == x[d] {
                    continue;
                }
                let (te, tll) = profile.evaluate(&to_growth(&trial));
                if tll > ll {
                    (x, e, ll) = (trial, te, tll);
                    improved = true;
                    break;
                }
            }
            if !improved {
                steps[d] *= 0.5;
            }
        }
    }
    Search { best_x: x, best_e: e, iterations, converged }
}

fn fit_bounded(profile: &Profile, starts: &[u64]) -> Search {
    let max_n = profile.obs.rows.iter().map(|r| r.n).max().unwrap_or(1).min(K_MAX_LIMIT);
    let mut candidates: Vec<u64> = log_grid(1.0, K_MAX_LIMIT as f64, GRID_1D).iter().map(|v| v.round() as u64).collect();
    candidates.extend(profile.obs.rows.iter().map(|r| r.n.min(K_MAX_LIMIT)));
    candidates.extend(starts.iter().copied());
    // Any k_max at or above the longest observed length behaves the same.
    candidates.iter_mut().for_each(|k| *k = (*k).clamp(1, max_n));
    candidates.sort_unstable();
    candidates.dedup();

    let eval = |k: u64| profile.evaluate(&KeyTokenGrowth::Bounded { k_max: k, ramp: 1.0 });
    let (mut k, (mut e, mut ll)) = (candidates[0], eval(candidates[0]));
    for &c in &candidates[1..] {
        let (ce, cll) = eval(c);
        if cll > ll {
            (k, e, ll) = (c, ce, cll);
        }
    }

    let mut step = (k / 4).max(1);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut improved = false;
        for trial in [k.saturating_add(step).min(max_n), k.saturating_sub(step).max(1)] {
            if trial == k {
                continue;
            }
            let (te, tll) = eval(trial);
            if tll > ll {
                (k, e, ll) = (trial, te, tll);
                improved = true;
                break;
            }
        }
        if !improved {
            if step == 1 {
                converged = true;
                break;
            }
            step /= 2;
        }
    }
    Search { best_x: vec![k as f64], best_e: e, iterations, converged }
}

fn check_fittable(obs: &ObservationSet) -> Result<(), FitError> {
    if obs.rows.len() < 3 {
        return Err(FitError::TooFewRows { rows: obs.rows.len() });
    }
    if obs.rows.iter().all(|r| r.successes == 0) {
        return Err(FitError::DegenerateData("zero successes"));
    }
    if obs.rows.iter().all(|r| r.successes == r.trials) {
        return Err(FitError::DegenerateData("successes equal to trials"));
    }
    Ok(())
}

/// Fits one family by maximum likelihood.
pub fn fit(kind: FamilyKind, obs: &ObservationSet) -> Result<FitResult, FitError> {
    fit_with_starts(kind, obs, &[])
}

/// As [`fit`], with extra candidate points of the same family added to the grid.
/// The returned likelihood is never below that of any start.
pub fn fit_with_starts(kind: FamilyKind, obs: &ObservationSet, starts: &[ModelFamily]) -> Result<FitResult, FitError> {
    check_fittable(obs)?;
    let profile = Profile::new(obs);
    let (family, iterations, converged) = match kind {
        FamilyKind::Naive => {
            let (e, _) = profile.evaluate(&KeyTokenGrowth::LinearFraction { phi: 1.0 });
            (ModelFamily::Naive { e }, 0, true)
        }
        FamilyKind::TwoRateLog => {
            let mut grid: Vec<Vec<f64>> = log_grid(SHAPE_MIN, SHAPE_MAX, GRID_1D).into_iter().map(|a| vec![a.ln()]).collect();
            grid.extend(starts.iter().filter_map(|s| match *s {
                ModelFamily::TwoRateLog { a, .. } => Some(vec![a.ln()]),
                _ => None,
            }));
            let step = (SHAPE_MAX / SHAPE_MIN).ln() / (GRID_1D - 1) as f64;
            let s = coordinate_search(&profile, grid, &[(SHAPE_MIN.ln(), SHAPE_MAX.ln())], vec![step], |x| {
                KeyTokenGrowth::Logarithmic { a: x[0].exp() }
            });
            (ModelFamily::TwoRateLog { e_key: s.best_e, a: s.best_x[0].exp() }, s.iterations, s.converged)
        }
        FamilyKind::TwoRatePower => {
            let mut grid = Vec::with_capacity(GRID_2D * GRID_2D);
            for c in log_grid(SHAPE_MIN, SHAPE_MAX, GRID_2D) {
                for alpha in lin_grid(ALPHA_MIN, ALPHA_MAX, GRID_2D) {
                    grid.push(vec![c.ln(), alpha]);
                }
            }
            grid.extend(starts.iter().filter_map(|s| match *s {
                ModelFamily::TwoRatePower { c, alpha, .. } => Some(vec![c.ln(), alpha]),
                _ => None,
            }));
            let steps = vec![
                (SHAPE_MAX / SHAPE_MIN).ln() / (GRID_2D - 1) as f64,
                (ALPHA_MAX - ALPHA_MIN) / (GRID_2D - 1) as f64,
            ];
            let bounds = [(SHAPE_MIN.ln(), SHAPE_MAX.ln()), (ALPHA_MIN, ALPHA_MAX)];
            let s = coordinate_search(&profile, grid, &bounds, steps, |x| KeyTokenGrowth::PowerLaw {
                c: x[0].exp(),
                alpha: x[1],
            });
            (
                ModelFamily::TwoRatePower { e_key: s.best_e, c: s.best_x[0].exp(), alpha: s.best_x[1] },
                s.iterations,
                s.converged,
            )
        }
        FamilyKind::TwoRateBounded => {
            let starts: Vec<u64> = starts
                .iter()
                .filter_map(|s| match *s {
                    ModelFamily::TwoRateBounded { k_max, .. } => Some(k_max),
                    _ => None,
                })
                .collect();
            let s = fit_bounded(&profile, &starts);
            (ModelFamily::TwoRateBounded { e_key: s.best_e, k_max: s.best_x[0] as u64 }, s.iterations, s.converged)
        }
    };
    let ll = log_likelihood(&family, obs);
    let param_count = kind.param_count();
    Ok(FitResult {
        family,
        param_count,
        log_likelihood: ll,
        aic: 2.0 * param_count as f64 - 2.0 * ll,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFailure {
    pub family: FamilyKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    /// Ascending AIC; near-ties go to fewer parameters, then [`FamilyKind::ALL`] order.
    pub ranked: Vec<FitResult>,
    pub failures: Vec<FamilyFailure>,
}

impl ModelRanking {
    pub fn best(&self) -> Option<&FitResult> {
        self.ranked.first()
    }
}

fn tie_key(f: &FitResult) -> (usize, usize) {
    let order = FamilyKind::ALL.iter().position(|k| *k == f.family.kind()).unwrap_or(usize::MAX);
    (f.param_count, order)
}

/// Orders fits by AIC. Runs of fits within [`AIC_TIE_TOLERANCE`] of the run's
/// lowest AIC are reordered by parameter count, then family order.
pub fn rank_fits(mut fits: Vec<FitResult>) -> Vec<FitResult> {
    fits.sort_by(|a, b| a.aic.total_cmp(&b.aic).then(tie_key(a).cmp(&tie_key(b))));
    let mut out = Vec::with_capacity(fits.len());
    let mut i = 0;
    while i < fits.len() {
        let head = fits[i].aic;
        let mut j = i + 1;
        while j < fits.len() && fits[j].aic - head <= AIC_TIE_TOLERANCE {
            j += 1;
        }
        let mut group = fits[i..j].to_vec();
        group.sort_by_key(tie_key);
        out.extend(group);
        i = j;
    }
    out
}

/// Fits every family and ranks them. A family that fails to fit is reported
/// in `failures` without stopping the others.
pub fn select_model(obs: &ObservationSet) -> ModelRanking {
    let results: Vec<(FamilyKind, Result<FitResult, FitError>)> =
        FamilyKind::ALL.par_iter().map(|&k| (k, fit(k, obs))).collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (family, r) in results {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => failures.push(FamilyFailure { family, error: e.to_string() }),
        }
    }
    ModelRanking { ranked: rank_fits(fits), failures }
}

/// Success probability at length `n` under a converged fit.
pub fn predict(fit: &FitResult, n: u64) -> Result<f64, FitError> {
    if !fit.converged {
        return Err(FitError::Unconverged { family: fit.family.label() });
    }
    Ok(sequence_success_probability(&fit.family.model(), n))
}

/// Binomial draws at the family's exact success probabilities.
pub fn synthetic_observations(
    family: &ModelFamily,
    lengths: &[u64],
    trials: u64,
    seed: u64,
) -> Result<ObservationSet, FitError> {
    family.validate()?;
    let model = family.model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = lengths
        .iter()
        .map(|&n| {
            let p = sequence_success_probability(&model, n);
            let successes = Binomial::new(trials, p).expect("probability in [0, 1]").sample(&mut rng);
            Observation { n, trials, successes }
        })
        .collect();
    ObservationSet::new(rows)
}
