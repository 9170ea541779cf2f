//! Moments accountant.
//!
//! The ledger tracks, for every integer order `λ` in `1..=32`, an upper
//! bound `α(λ)` on the log moment generating function of the privacy loss.
//! Per-round bounds add up under composition, and the accumulated bounds
//! convert to an `(ε, δ)` guarantee through the tail bound
//! `δ = min_λ exp(α(λ) - λε)`, i.e. `ε = min_λ (α(λ) + ln(1/δ)) / λ`.
//!
//! Two mechanisms are charged per P3SGD round:
//!
//! * the exponential-mechanism selection among noisy candidates, bounded by
//!   `q · λ(λ+1) ε'^2 / 2` ([`selection_moment`]);
//! * the Gaussian release of the selected update, whose subsampled log
//!   moment is computed by numerical quadrature ([`gaussian_moment`]).

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest moment order tracked; the grid is `1..=MAX_LAMBDA`.
pub const MAX_LAMBDA: u32 = 32;
const GRID: usize = MAX_LAMBDA as usize;

/// Relative error target for the moment integrals.
const QUAD_REL_TOL: f64 = 1e-11;
const QUAD_MAX_INTERVALS: usize = 20_000;
/// Half-width of the integration window beyond the integrand peaks, in
/// noise standard deviations.
const QUAD_TAIL_SIGMAS: f64 = 30.0;

pub fn lambda_grid() -> impl Iterator<Item = u32> + Clone {
    1..=MAX_LAMBDA
}

/// Accumulated log-moment bounds, one per grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsLedger {
    alpha: Vec<f64>,
}

impl Default for MomentsLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl MomentsLedger {
    pub fn new() -> Self {
        Self { alpha: vec![0.0; GRID] }
    }

    /// Accumulated bound at order `lambda` (1-based).
    pub fn alpha(&self, lambda: u32) -> f64 {
        self.alpha[(lambda - 1) as usize]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Adds one mechanism's per-order bounds (composition).
    pub fn accumulate(&mut self, bounds: &[f64]) -> Result<()> {
        if bounds.len() != GRID {
            return Err(Error::DimensionMismatch {
                expected: GRID,
                actual: bounds.len(),
            });
        }
        if let Some(i) = bounds.iter().position(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid(
                "bounds",
                format!(
                    "moment bound at lambda={} is {}, must be finite and non-negative",
                    i + 1,
                    bounds[i]
                ),
            ));
        }
        self.alpha.iter_mut().zip(bounds).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// An `(ε, δ)` guarantee and the order that achieved the minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub lambda: u32,
}

/// `ε = min_λ (α(λ) + ln(1/δ)) / λ` over the fixed grid. Ties go to the
/// smaller order.
pub fn eps_for_delta(ledger: &MomentsLedger, delta: f64) -> Result<PrivacySpend> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let (lambda, epsilon) = lambda_grid()
        .map(|l| (l, (ledger.alpha(l) + log_inv_delta) / f64::from(l)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    Ok(PrivacySpend { epsilon, delta, lambda })
}

/// Log-moment bound of the exponential-mechanism selection step:
/// `q · λ(λ+1) ε'^2 / 2`.
pub fn selection_moment(q: f64, eps_select: f64, lambda: u32) -> f64 {
    let l = f64::from(lambda);
    q * l * (l + 1.0) * eps_select * eps_select / 2.0
}

fn check_q_z(q: f64, z: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(
            "q",
            format!("sampling ratio must lie in (0, 1], got {q}"),
        ));
    }
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::invalid(
            "z",
            format!("noise multiplier must be positive, got {z}"),
        ));
    }
    Ok(())
}

/// Log moment `α(λ)` of the subsampled Gaussian mechanism with inclusion
/// probability `q` and noise multiplier `z`:
///
/// `α(λ) = ln max(E_{μ0}[(μ0/μ)^λ], E_{μ}[(μ/μ0)^λ])`, with
/// `μ0 = N(0, z²)`, `μ1 = N(1, z²)`, `μ = (1-q) μ0 + q μ1`.
///
/// Both expectations are integrated in the log domain with adaptive
/// Gauss-Kronrod quadrature; an integral that does not reach the relative
/// error target is reported as [`Error::Quadrature`].
pub fn gaussian_moment(q: f64, z: f64, lambda: u32) -> Result<f64> {
    check_q_z(q, z)?;
    if lambda == 0 {
        return Err(Error::invalid("lambda", "must be at least 1"));
    }
    let mix = SubsampledGaussian::new(q, z);
    let l = f64::from(lambda);
    let lo = -(l + 1.0) - QUAD_TAIL_SIGMAS * z;
    let hi = (l + 2.0) + QUAD_TAIL_SIGMAS * z;
    let what = |which: &str| format!("{which} at q={q}, z={z}, lambda={lambda}");

    // E_{μ0}[(μ0/μ)^λ]: log integrand ln μ0 - λ ln(μ/μ0)
    let log_e1 = log_integral(|x| mix.log_mu0(x) - l * mix.log_ratio(x), lo, hi).map_err(|(error, intervals)| {
        Error::Quadrature {
            what: what("E1"),
            error,
            intervals,
        }
    })?;
    // E_{μ}[(μ/μ0)^λ]: log integrand ln μ0 + (λ+1) ln(μ/μ0)
    let log_e2 =
        log_integral(|x| mix.log_mu0(x) + (l + 1.0) * mix.log_ratio(x), lo, hi).map_err(|(error, intervals)| {
            Error::Quadrature {
                what: what("E2"),
                error,
                intervals,
            }
        })?;
    // Both expectations are >= 1 by Jensen; quadrature noise can dip a hair
    // below, and the ledger only takes non-negative bounds.
    Ok(log_e1.max(log_e2).max(0.0))
}

/// `α(λ)` for every grid order.
pub fn gaussian_moments(q: f64, z: f64) -> Result<Vec<f64>> {
    lambda_grid().map(|l| gaussian_moment(q, z, l)).collect()
}

struct SubsampledGaussian {
    q: f64,
    inv_two_var: f64,
    log_norm: f64,
}

impl SubsampledGaussian {
    fn new(q: f64, z: f64) -> Self {
        Self {
            q,
            inv_two_var: 1.0 / (2.0 * z * z),
            log_norm: -(z * (2.0 * std::f64::consts::PI).sqrt()).ln(),
        }
    }

    fn log_mu0(&self, x: f64) -> f64 {
        self.log_norm - x * x * self.inv_two_var
    }

    /// `ln(μ(x) / μ0(x)) = ln(1 - q + q e^r)` with `r = ln(μ1/μ0) = (2x-1)/(2z²)`.
    fn log_ratio(&self, x: f64) -> f64 {
        let r = (2.0 * x - 1.0) * self.inv_two_var;
        if self.q == 1.0 {
            r
        } else if r > 30.0 {
            r + (self.q + (1.0 - self.q) * (-r).exp()).ln()
        } else {
            (self.q * r.exp_m1()).ln_1p()
        }
    }
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1] (nonnegative half).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Kronrod estimate and |Kronrod - Gauss| on one interval.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = half * XGK[i];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half)
}

/// Globally adaptive integration of a non-negative integrand. Returns the
/// integral, or `(error estimate, intervals)` when the tolerance is not met.
pub(crate) fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    initial_pieces: usize,
) -> std::result::Result<f64, (f64, usize)> {
    let pieces = initial_pieces.max(1);
    let width = (b - a) / pieces as f64;
    let mut intervals: Vec<(f64, f64, f64, f64)> = (0..pieces)
        .map(|i| {
            let lo = a + width * i as f64;
            let hi = if i + 1 == pieces { b } else { lo + width };
            let (v, e) = gk15(&f, lo, hi);
            (lo, hi, v, e)
        })
        .collect();
    loop {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let error: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !total.is_finite() || !error.is_finite() {
            return Err((f64::INFINITY, intervals.len()));
        }
        if error <= QUAD_REL_TOL * total.abs() {
            return Ok(total);
        }
        if intervals.len() >= QUAD_MAX_INTERVALS {
            return Err((error / total.abs(), intervals.len()));
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err((error / total.abs(), intervals.len() + 1));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

/// `ln ∫ exp(g(x)) dx` over `[lo, hi]`, rescaled by the maximum of `g` on a
/// coarse scan so the integrand stays in floating-point range.
fn log_integral<G: Fn(f64) -> f64>(g: G, lo: f64, hi: f64) -> std::result::Result<f64, (f64, usize)> {
    const SCAN: usize = 4096;
    let step = (hi - lo) / SCAN as f64;
    let shift = (0..=SCAN)
        .map(|i| g(lo + step * i as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    let value = integrate_adaptive(|x| (g(x) - shift).exp(), lo, hi, 64)?;
    Ok(shift + value.ln())
}

/// Per-`(q, z)` cache of the Gaussian moment vector. P3SGD reuses very few
/// distinct triples, so each is integrated once.
#[derive(Debug, Default, Clone)]
pub struct MomentCache {
    entries: HashMap<(u64, u64), Vec<f64>>,
}

impl MomentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gaussian(&mut self, q: f64, z: f64) -> Result<&[f64]> {
        check_q_z(q, z)?;
        let key = (q.to_bits(), z.to_bits());
        match self.entries.entry(key) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(gaussian_moments(q, z)?)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Charges one P3SGD round: the selection moment (skipped when there is a
/// single candidate, since no selection happens) plus the Gaussian moment of
/// the selected noise multiplier.
pub fn charge_p3sgd_round(
    ledger: &mut MomentsLedger,
    cache: &mut MomentCache,
    q: f64,
    z_selected: f64,
    eps_select: f64,
    n_z: usize,
) -> Result<()> {
    charge_round_with(ledger, cache, q, z_selected, (n_z > 1).then_some(eps_select))
}

/// Charges the Gaussian moment of `z_selected` and, when `selection` is
/// `Some(ε')`, the selection moment at `ε'`.
pub fn charge_round_with(
    ledger: &mut MomentsLedger,
    cache: &mut MomentCache,
    q: f64,
    z_selected: f64,
    selection: Option<f64>,
) -> Result<()> {
    if let Some(eps) = selection {
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::invalid("eps_select", format!("must be non-negative, got {eps}")));
        }
    }
    let gaussian = cache.gaussian(q, z_selected)?;
    let bounds: Vec<f64> = lambda_grid()
        .zip(gaussian)
        .map(|(l, g)| g + selection.map_or(0.0, |eps| selection_moment(q, eps, l)))
        .collect();
    ledger.accumulate(&bounds)
}

/// Ledger plus the fixed `(q, δ)` of a training run.
#[derive(Debug, Clone)]
pub struct MomentsAccountant {
    q: f64,
    delta: f64,
    ledger: MomentsLedger,
    cache: MomentCache,
    rounds_charged: usize,
}

impl MomentsAccountant {
    pub fn new(q: f64, delta: f64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::invalid(
                "q",
                format!("sampling ratio must lie in (0, 1], got {q}"),
            ));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
        }
        Ok(Self {
            q,
            delta,
            ledger: MomentsLedger::new(),
            cache: MomentCache::new(),
            rounds_charged: 0,
        })
    }

    /// `δ = 1 / N^1.1` for a database of `n_patients`.
    pub fn default_delta(n_patients: usize) -> f64 {
        1.0 / (n_patients.max(2) as f64).powf(1.1)
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn ledger(&self) -> &MomentsLedger {
        &self.ledger
    }

    pub fn rounds_charged(&self) -> usize {
        self.rounds_charged
    }

    pub fn charge_round(&mut self, z_selected: f64, selection: Option<f64>) -> Result<()> {
        charge_round_with(&mut self.ledger, &mut self.cache, self.q, z_selected, selection)?;
        self.rounds_charged += 1;
        Ok(())
    }

    pub fn spend(&self) -> PrivacySpend {
        // delta was validated at construction
        eps_for_delta(&self.ledger, self.delta).expect("delta validated in constructor")
    }
}
