//! Closed-form key-rate math: binary entropy, the random-sampling bound on
//! phase-error deviations, finite-key secret key rate, final key length and
//! the bias optimizer.
//!
//! Basis convention: `x` quantities belong to the diagonal basis, `z` to the
//! rectilinear basis. The phase error of the X key is estimated from the Z
//! bit error rate (`e_bz + eps_x`, sampled over `n_zz` bits) and vice versa
//! (`e_bx + eps_z`, sampled over `n_xx` bits).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyRateError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("sample count must be at least 1")]
    EmptySample,
}

fn check(name: &'static str, value: f64, lo: f64, hi: f64, domain: &'static str) -> Result<(), KeyRateError> {
    if value.is_nan() || value < lo || value > hi {
        Err(KeyRateError::Domain { name, value, domain })
    } else {
        Ok(())
    }
}

/// Binary Shannon entropy in bits, with `0 log 0 = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, KeyRateError> {
    check("x", x, 0.0, 1.0, "[0, 1]")?;
    Ok(h2(x))
}

#[inline]
pub(crate) fn h2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Entropy of an error-rate estimate, with the argument clamped to 0.5.
#[inline]
fn h2_clamped(x: f64) -> (f64, bool) {
    if x > 0.5 {
        (1.0, true)
    } else {
        (h2(x.max(0.0)), false)
    }
}

/// Upper bound on the probability that the inferred phase error rate exceeds
/// the measured bit error rate by more than `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingBound {
    pub probability: f64,
    /// Set when `e = 0`: the bound collapses to 0 or 1 and carries no
    /// statistical content.
    pub degenerate: bool,
}

pub fn sampling_bound(eps: f64, n: u64, e: f64) -> Result<SamplingBound, KeyRateError> {
    if n == 0 {
        return Err(KeyRateError::EmptySample);
    }
    check("eps", eps, 0.0, f64::INFINITY, "[0, inf)")?;
    check("e", e, 0.0, 0.5, "[0, 0.5]")?;
    if e == 0.0 {
        let probability = if eps > 0.0 { 0.0 } else { 1.0 };
        return Ok(SamplingBound {
            probability,
            degenerate: true,
        });
    }
    Ok(SamplingBound {
        probability: (-eps * eps * n as f64 / (4.0 * e * (1.0 - e))).exp(),
        degenerate: false,
    })
}

/// Smallest deviation whose sampling bound equals `target`.
pub fn solve_epsilon(n: u64, e: f64, target: f64) -> Result<f64, KeyRateError> {
    if n == 0 {
        return Err(KeyRateError::EmptySample);
    }
    check("e", e, 0.0, 0.5, "[0, 0.5]")?;
    check("target", target, f64::MIN_POSITIVE, f64::INFINITY, "(0, inf)")?;
    if target >= 1.0 {
        return Ok(0.0);
    }
    Ok((4.0 * e * (1.0 - e) * (1.0 / target).ln() / n as f64).sqrt())
}

/// Inputs of the finite-key rate with possibly different biases for the
/// two stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateParams {
    pub q_a: f64,
    pub q_b: f64,
    pub e_bx: f64,
    pub e_bz: f64,
    pub f_x: f64,
    pub f_z: f64,
    pub eps_x: f64,
    pub eps_z: f64,
}

impl KeyRateParams {
    /// Same bias for both stations, no finite-key deviation.
    pub fn symmetric(q: f64, e_bx: f64, e_bz: f64, f_x: f64, f_z: f64) -> Self {
        Self {
            q_a: q,
            q_b: q,
            e_bx,
            e_bz,
            f_x,
            f_z,
            eps_x: 0.0,
            eps_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), KeyRateError> {
        check("q_a", self.q_a, 0.0, 1.0, "[0, 1]")?;
        check("q_b", self.q_b, 0.0, 1.0, "[0, 1]")?;
        check("e_bx", self.e_bx, 0.0, 0.5, "[0, 0.5]")?;
        check("e_bz", self.e_bz, 0.0, 0.5, "[0, 0.5]")?;
        check("f_x", self.f_x, 1.0, f64::INFINITY, "[1, inf)")?;
        check("f_z", self.f_z, 1.0, f64::INFINITY, "[1, inf)")?;
        check("eps_x", self.eps_x, 0.0, f64::INFINITY, "[0, inf)")?;
        check("eps_z", self.eps_z, 0.0, f64::INFINITY, "[0, inf)")?;
        Ok(())
    }
}

/// Value of the key rate together with a flag telling whether any
/// phase-error estimate had to be clamped at 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEvaluation {
    pub rate: f64,
    pub clamped: bool,
}

/// Secure bits per raw bit. Negative values are returned as-is.
pub fn key_rate(p: &KeyRateParams) -> Result<RateEvaluation, KeyRateError> {
    p.validate()?;
    Ok(key_rate_unchecked(p))
}

fn key_rate_unchecked(p: &KeyRateParams) -> RateEvaluation {
    let w_x = (1.0 - p.q_a) * (1.0 - p.q_b);
    let w_z = p.q_a * p.q_b;
    let (ph_x, cx) = h2_clamped(p.e_bz + p.eps_x);
    let (ph_z, cz) = h2_clamped(p.e_bx + p.eps_z);
    let rate = w_x * (1.0 - p.f_x * h2(p.e_bx) - ph_x) + w_z * (1.0 - p.f_z * h2(p.e_bz) - ph_z);
    RateEvaluation {
        rate,
        clamped: cx || cz,
    }
}

/// Split of the total parameter-estimation failure probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBudget {
    pub p_eps_x: f64,
    pub p_eps_z: f64,
}

impl EpsilonBudget {
    pub fn even(total: f64) -> Self {
        Self {
            p_eps_x: total / 2.0,
            p_eps_z: total / 2.0,
        }
    }

    /// `fraction` of the total goes to the X estimate.
    pub fn split(total: f64, fraction: f64) -> Self {
        Self {
            p_eps_x: total * fraction,
            p_eps_z: total * (1.0 - fraction),
        }
    }

    pub fn total(&self) -> f64 {
        self.p_eps_x + self.p_eps_z
    }

    pub fn validate(&self) -> Result<(), KeyRateError> {
        check("p_eps_x", self.p_eps_x, f64::MIN_POSITIVE, 1.0 - f64::EPSILON, "(0, 1)")?;
        check("p_eps_z", self.p_eps_z, f64::MIN_POSITIVE, 1.0 - f64::EPSILON, "(0, 1)")?;
        Ok(())
    }
}

/// Deviations for a given budget. `eps_x` is sampled over the Z-matched
/// rounds, `eps_z` over the X-matched rounds. An empty sample gives the
/// maximal deviation 0.5.
pub fn deviations(n_xx: f64, n_zz: f64, e_bx: f64, e_bz: f64, budget: &EpsilonBudget) -> (f64, f64) {
    let dev = |n: f64, e: f64, p: f64| {
        if n < 1.0 {
            0.5
        } else {
            (4.0 * e * (1.0 - e) * (1.0 / p).ln() / n).sqrt()
        }
    };
    (dev(n_zz, e_bz, budget.p_eps_x), dev(n_xx, e_bx, budget.p_eps_z))
}

/// Observed (or projected) session statistics for bias optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeInput {
    /// Total coincident pairs.
    pub n_total: f64,
    pub e_bx: f64,
    pub e_bz: f64,
    pub f_x: f64,
    pub f_z: f64,
    /// Total failure probability `P_eps = P_eps_x + P_eps_z`.
    pub p_eps: f64,
}

impl OptimizeInput {
    pub fn validate(&self) -> Result<(), KeyRateError> {
        check("n_total", self.n_total, 1.0, f64::INFINITY, "[1, inf)")?;
        check("e_bx", self.e_bx, f64::MIN_POSITIVE, 0.5, "(0, 0.5)")?;
        check("e_bz", self.e_bz, f64::MIN_POSITIVE, 0.5, "(0, 0.5)")?;
        check("f_x", self.f_x, 1.0, f64::INFINITY, "[1, inf)")?;
        check("f_z", self.f_z, 1.0, f64::INFINITY, "[1, inf)")?;
        check("p_eps", self.p_eps, f64::MIN_POSITIVE, 1.0 - f64::EPSILON, "(0, 1)")?;
        Ok(())
    }
}

/// Key rate at a fixed bias pair with the budget split chosen to maximize it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub q_a: f64,
    pub q_b: f64,
    pub eps_x: f64,
    pub eps_z: f64,
    pub budget: EpsilonBudget,
    pub rate: f64,
}

/// Outcome of [`optimize_bias`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub best: BiasPoint,
    /// `max(R, 0)`.
    pub rate: f64,
    /// False when no bias in the search range yields a positive rate.
    pub positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasSearch {
    /// `q_A = q_B = q`.
    Symmetric,
    /// Independent `(q_A, q_B)`.
    Asymmetric,
}

pub const GRID_STEP: f64 = 0.005;
pub const Q_MIN: f64 = 0.01;
pub const Q_MAX: f64 = 0.99;
const SPLIT_GRID: usize = 49;
const GOLDEN_ITERS: usize = 60;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
fn golden_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..GOLDEN_ITERS {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

fn rate_with_split(input: &OptimizeInput, q_a: f64, q_b: f64, fraction: f64) -> (f64, f64, f64) {
    let n_xx = input.n_total * (1.0 - q_a) * (1.0 - q_b);
    let n_zz = input.n_total * q_a * q_b;
    let budget = EpsilonBudget::split(input.p_eps, fraction);
    let (eps_x, eps_z) = deviations(n_xx, n_zz, input.e_bx, input.e_bz, &budget);
    let r = key_rate_unchecked(&KeyRateParams {
        q_a,
        q_b,
        e_bx: input.e_bx,
        e_bz: input.e_bz,
        f_x: input.f_x,
        f_z: input.f_z,
        eps_x,
        eps_z,
    });
    (r.rate, eps_x, eps_z)
}

/// Maximizes over the X share of the budget: coarse grid, then golden
/// section inside the best grid cell.
pub(crate) fn best_split(objective: impl Fn(f64) -> f64) -> f64 {
    let step = 1.0 / (SPLIT_GRID + 1) as f64;
    let mut best_i = 1;
    let mut best_v = f64::NEG_INFINITY;
    for i in 1..=SPLIT_GRID {
        let v = objective(i as f64 * step);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let lo = (best_i as f64 - 1.0) * step;
    let hi = (best_i as f64 + 1.0) * step;
    let (x, v) = golden_max(lo.max(1e-9), hi.min(1.0 - 1e-9), &objective);
    if v >= best_v {
        x
    } else {
        best_i as f64 * step
    }
}

/// Key rate at `(q_a, q_b)` with a co-optimized budget split.
pub fn rate_at_bias(input: &OptimizeInput, q_a: f64, q_b: f64) -> BiasPoint {
    let fraction = best_split(|s| rate_with_split(input, q_a, q_b, s).0);
    let (rate, eps_x, eps_z) = rate_with_split(input, q_a, q_b, fraction);
    BiasPoint {
        q_a,
        q_b,
        eps_x,
        eps_z,
        budget: EpsilonBudget::split(input.p_eps, fraction),
        rate,
    }
}

fn grid_points() -> Vec<f64> {
    let steps = ((Q_MAX - Q_MIN) / GRID_STEP).round() as usize;
    (0..=steps).map(|i| Q_MIN + i as f64 * GRID_STEP).collect()
}

/// Symmetric rate curve over the search grid, ascending in `q`.
pub fn symmetric_curve(input: &OptimizeInput) -> Result<Vec<BiasPoint>, KeyRateError> {
    input.validate()?;
    Ok(grid_points()
        .into_iter()
        .map(|q| rate_at_bias(input, q, q))
        .collect())
}

/// Rate surface over the `(q_A, q_B)` grid, row-major in `q_A`.
pub fn asymmetric_grid(input: &OptimizeInput, step: f64) -> Result<Vec<BiasPoint>, KeyRateError> {
    input.validate()?;
    check("step", step, 1e-4, 0.5, "[1e-4, 0.5]")?;
    let steps = ((Q_MAX - Q_MIN) / step).round() as usize;
    let qs: Vec<f64> = (0..=steps).map(|i| Q_MIN + i as f64 * step).collect();
    Ok(qs
        .iter()
        .flat_map(|&qa| qs.iter().map(move |&qb| (qa, qb)))
        .map(|(qa, qb)| rate_at_bias(input, qa, qb))
        .collect())
}

/// Relative tolerance under which two rates count as tied.
const TIE_TOL: f64 = 1e-12;

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + TIE_TOL * incumbent.abs().max(1e-300)
}

/// Global maximum of the key rate over the bias.
///
/// Search: the grid `q = 0.01, 0.015, ..., 0.99` (both axes for the
/// asymmetric search), then golden-section refinement within one grid step
/// of the best node (alternating axes for the asymmetric search). Ties
/// between mirrored maxima go to the larger `q`.
pub fn optimize_bias(input: &OptimizeInput, search: BiasSearch) -> Result<KeyRateResult, KeyRateError> {
    input.validate()?;
    let grid = grid_points();
    let best = match search {
        BiasSearch::Symmetric => {
            let mut best = rate_at_bias(input, Q_MAX, Q_MAX);
            for &q in grid.iter().rev() {
                let p = rate_at_bias(input, q, q);
                if better(p.rate, best.rate) {
                    best = p;
                }
            }
            let (q, _) = golden_max(
                (best.q_a - GRID_STEP).max(Q_MIN),
                (best.q_a + GRID_STEP).min(Q_MAX),
                |q| rate_at_bias(input, q, q).rate,
            );
            let refined = rate_at_bias(input, q, q);
            if refined.rate >= best.rate {
                refined
            } else {
                best
            }
        }
        BiasSearch::Asymmetric => {
            let mut best = rate_at_bias(input, Q_MAX, Q_MAX);
            for &qa in grid.iter().rev() {
                for &qb in grid.iter().rev() {
                    let p = rate_at_bias(input, qa, qb);
                    if better(p.rate, best.rate) {
                        best = p;
                    }
                }
            }
            let (lo_a, hi_a) = ((best.q_a - GRID_STEP).max(Q_MIN), (best.q_a + GRID_STEP).min(Q_MAX));
            let (lo_b, hi_b) = ((best.q_b - GRID_STEP).max(Q_MIN), (best.q_b + GRID_STEP).min(Q_MAX));
            let mut current = best;
            for _ in 0..4 {
                let qb = current.q_b;
                let (qa, _) = golden_max(lo_a, hi_a, |qa| rate_at_bias(input, qa, qb).rate);
                let (qb, _) = golden_max(lo_b, hi_b, |qb| rate_at_bias(input, qa, qb).rate);
                let p = rate_at_bias(input, qa, qb);
                if p.rate >= current.rate {
                    current = p;
                }
            }
            current
        }
    };
    Ok(KeyRateResult {
        best,
        rate: best.rate.max(0.0),
        positive: best.rate > 0.0,
    })
}

/// Inputs for the final key length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureLengthInput {
    pub n_xx: u64,
    pub n_zz: u64,
    pub e_bx: f64,
    pub e_bz: f64,
    pub eps_x: f64,
    pub eps_z: f64,
    pub leak_x: u64,
    pub leak_z: u64,
}

/// Final key length after privacy amplification, floored at zero.
pub fn secure_length(s: &SecureLengthInput) -> Result<u64, KeyRateError> {
    check("e_bx", s.e_bx, 0.0, 0.5, "[0, 0.5]")?;
    check("e_bz", s.e_bz, 0.0, 0.5, "[0, 0.5]")?;
    check("eps_x", s.eps_x, 0.0, f64::INFINITY, "[0, inf)")?;
    check("eps_z", s.eps_z, 0.0, f64::INFINITY, "[0, inf)")?;
    if s.leak_x > s.n_xx {
        return Err(KeyRateError::Domain {
            name: "leak_x",
            value: s.leak_x as f64,
            domain: "[0, n_xx]",
        });
    }
    if s.leak_z > s.n_zz {
        return Err(KeyRateError::Domain {
            name: "leak_z",
            value: s.leak_z as f64,
            domain: "[0, n_zz]",
        });
    }
    Ok(secure_length_real(s).floor().max(0.0) as u64)
}

pub(crate) fn secure_length_real(s: &SecureLengthInput) -> f64 {
    let (ph_x, _) = h2_clamped(s.e_bz + s.eps_x);
    let (ph_z, _) = h2_clamped(s.e_bx + s.eps_z);
    s.n_xx as f64 * (1.0 - ph_x) - s.leak_x as f64 + s.n_zz as f64 * (1.0 - ph_z) - s.leak_z as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent evaluation of the entropy through natural logs.
    fn entropy_oracle(x: f64) -> f64 {
        if x == 0.0 || x == 1.0 {
            0.0
        } else {
            (-x * x.ln() - (1.0 - x) * (1.0 - x).ln()) / std::f64::consts::LN_2
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((entropy_oracle(0.11) - 0.499_915).abs() < 1e-6);
        assert!((binary_entropy(0.11).unwrap() - 0.49992).abs() < 1e-5);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn sampling_bound_examples() {
        let b = sampling_bound(0.01, 10_000, 0.05).unwrap();
        assert!(b.probability <= 0.0052 && b.probability > 0.0051);
        assert_eq!(sampling_bound(0.0, 10_000, 0.05).unwrap().probability, 1.0);
        let expected = (-4.0f64 / 0.19).exp();
        assert!((sampling_bound(0.02, 10_000, 0.05).unwrap().probability - expected).abs() < 1e-20);
        assert!((expected - 7.2e-10).abs() < 0.05e-10);
    }

    #[test]
    fn sampling_bound_degenerate() {
        let b = sampling_bound(0.01, 100, 0.0).unwrap();
        assert_eq!(b.probability, 0.0);
        assert!(b.degenerate);
        assert_eq!(sampling_bound(0.0, 100, 0.0).unwrap().probability, 1.0);
        assert_eq!(sampling_bound(0.01, 0, 0.05), Err(KeyRateError::EmptySample));
    }

    #[test]
    fn solve_epsilon_examples() {
        assert!((solve_epsilon(10_000, 0.05, 0.0052).unwrap() - 0.01).abs() < 1e-4);
        assert!(solve_epsilon(10_000_000_000, 0.05, 1e-6).unwrap() < 1e-3);
        let eps = solve_epsilon(1_000_000, 0.054, 5e-7).unwrap();
        let closed = (4.0 * 0.054 * 0.946 * (2e6f64).ln() / 1e6).sqrt();
        assert!((eps - closed).abs() < 1e-15);
        let back = sampling_bound(eps, 1_000_000, 0.054).unwrap().probability;
        assert!((back - 5e-7).abs() / 5e-7 < 1e-12);
        assert_eq!(solve_epsilon(100, 0.05, 1.0).unwrap(), 0.0);
        assert_eq!(solve_epsilon(0, 0.05, 0.1), Err(KeyRateError::EmptySample));
    }

    #[test]
    fn key_rate_boundaries() {
        let p = KeyRateParams::symmetric(1.0, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(key_rate(&p).unwrap().rate, 1.0);
        let p = KeyRateParams::symmetric(0.5, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(key_rate(&p).unwrap().rate, 0.5);
    }

    #[test]
    fn key_rate_clamps() {
        let mut p = KeyRateParams::symmetric(0.5, 0.3, 0.3, 1.0, 1.0);
        p.eps_x = 0.3;
        let r = key_rate(&p).unwrap();
        assert!(r.clamped);
        assert!(r.rate < 0.0);
        assert!(key_rate(&KeyRateParams::symmetric(0.5, 0.6, 0.0, 1.0, 1.0)).is_err());
        assert!(key_rate(&KeyRateParams::symmetric(0.5, 0.1, 0.0, 0.9, 1.0)).is_err());
    }

    fn fig1_input() -> OptimizeInput {
        OptimizeInput {
            n_total: 3e7,
            e_bx: 0.054,
            e_bz: 0.012,
            f_x: 1.31,
            f_z: 1.59,
            p_eps: 1e-6,
        }
    }

    #[test]
    fn key_rate_near_fig1_optimum() {
        let input = fig1_input();
        let at = |q: f64| {
            let n = input.n_total;
            let b = EpsilonBudget::even(input.p_eps);
            let (eps_x, eps_z) = deviations(n * (1.0 - q) * (1.0 - q), n * q * q, 0.054, 0.012, &b);
            key_rate(&KeyRateParams {
                eps_x,
                eps_z,
                ..KeyRateParams::symmetric(q, 0.054, 0.012, 1.31, 1.59)
            })
            .unwrap()
            .rate
        };
        assert!(at(0.97) > 0.5 * at(0.5));
        // Central finite difference around the optimum is small compared to
        // the slope elsewhere.
        let h = 1e-3;
        let slope = |q: f64| (at(q + h) - at(q - h)) / (2.0 * h);
        assert!(slope(0.95) > 0.0);
        assert!(slope(0.98) < 0.0);
        assert!(slope(0.965).abs() < 0.1 * slope(0.9).abs());
    }

    #[test]
    fn optimize_bias_fig1_band() {
        let r = optimize_bias(&fig1_input(), BiasSearch::Symmetric).unwrap();
        assert!(r.positive);
        assert!((0.94..=0.99).contains(&r.best.q_a), "q* = {}", r.best.q_a);
        assert_eq!(r.best.q_a, r.best.q_b);
        let b = r.best.budget;
        assert!((b.total() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn optimize_bias_tie_goes_high() {
        let input = OptimizeInput {
            n_total: 1e6,
            e_bx: 0.03,
            e_bz: 0.03,
            f_x: 1.2,
            f_z: 1.2,
            p_eps: 1e-6,
        };
        let r = optimize_bias(&input, BiasSearch::Symmetric).unwrap();
        assert!(r.best.q_a > 0.5);
        let mirror = rate_at_bias(&input, 1.0 - r.best.q_a, 1.0 - r.best.q_a);
        assert!((mirror.rate - r.best.rate).abs() < 1e-9);
    }

    #[test]
    fn optimize_bias_favors_efficient_basis() {
        let input = OptimizeInput {
            n_total: 1e6,
            e_bx: 0.03,
            e_bz: 0.03,
            f_x: 1.5,
            f_z: 1.1,
            p_eps: 1e-6,
        };
        let r = optimize_bias(&input, BiasSearch::Symmetric).unwrap();
        assert!(r.best.q_a > 0.5);
        let mirror = rate_at_bias(&input, 1.0 - r.best.q_a, 1.0 - r.best.q_a);
        assert!(r.best.rate > mirror.rate + 1e-4);
    }

    #[test]
    fn optimize_bias_no_positive_rate() {
        let input = OptimizeInput {
            n_total: 1e4,
            e_bx: 0.2,
            e_bz: 0.2,
            f_x: 1.5,
            f_z: 1.5,
            p_eps: 1e-6,
        };
        let r = optimize_bias(&input, BiasSearch::Symmetric).unwrap();
        assert!(!r.positive);
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn asymmetric_agrees_with_symmetric_band() {
        let input = OptimizeInput {
            n_total: 3e7,
            ..fig1_input()
        };
        let sym = optimize_bias(&input, BiasSearch::Symmetric).unwrap();
        let asym = optimize_bias(&input, BiasSearch::Asymmetric).unwrap();
        assert!(asym.best.rate >= sym.best.rate - 1e-9);
        assert!(asym.best.q_a > 0.9 && asym.best.q_b > 0.9);
    }

    #[test]
    fn secure_length_examples() {
        let base = SecureLengthInput {
            n_xx: 0,
            n_zz: 1000,
            e_bx: 0.0,
            e_bz: 0.0,
            eps_x: 0.0,
            eps_z: 0.0,
            leak_x: 0,
            leak_z: 0,
        };
        assert_eq!(secure_length(&base).unwrap(), 1000);
        let x_only = SecureLengthInput {
            n_xx: 1000,
            n_zz: 0,
            e_bz: 0.5,
            ..base
        };
        assert_eq!(secure_length(&x_only).unwrap(), 0);
        let bad = SecureLengthInput { leak_z: 1001, ..base };
        assert!(secure_length(&bad).is_err());
    }

    #[test]
    fn secure_length_spreadsheet_crosscheck() {
        let eps = solve_epsilon(10_000, 0.054, 5e-7).unwrap();
        let eps_x = solve_epsilon(1_000_000, 0.012, 5e-7).unwrap();
        let s = SecureLengthInput {
            n_xx: 10_000,
            n_zz: 1_000_000,
            e_bx: 0.054,
            e_bz: 0.012,
            eps_x,
            eps_z: eps,
            leak_x: 4_100,
            leak_z: 160_000,
        };
        // Term-by-term re-evaluation with the ln-based entropy.
        let x_term = 10_000.0 * (1.0 - entropy_oracle(0.012 + eps_x)) - 4_100.0;
        let z_term = 1_000_000.0 * (1.0 - entropy_oracle(0.054 + eps)) - 160_000.0;
        assert_eq!(secure_length(&s).unwrap(), (x_term + z_term).floor() as u64);
    }

    proptest! {
        #[test]
        fn entropy_symmetric(x in 0.0f64..=1.0) {
            prop_assert!((h2(x) - h2(1.0 - x)).abs() < 1e-12);
            prop_assert!((h2(x) - entropy_oracle(x)).abs() < 1e-12);
        }

        #[test]
        fn entropy_concave(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let mid = h2(t * a + (1.0 - t) * b);
            prop_assert!(mid >= t * h2(a) + (1.0 - t) * h2(b) - 1e-12);
        }

        #[test]
        fn entropy_max_only_at_half(x in 0.0f64..=1.0) {
            prop_assume!((x - 0.5).abs() > 1e-6);
            prop_assert!(h2(x) < 1.0);
        }

        #[test]
        fn epsilon_round_trip(n in 1u64..100_000_000, e in 1e-4f64..=0.5, target in 1e-12f64..0.999) {
            let eps = solve_epsilon(n, e, target).unwrap();
            let back = sampling_bound(eps, n, e).unwrap().probability;
            prop_assert!((back - target).abs() / target < 1e-12, "{back} vs {target}");
        }

        #[test]
        fn sampling_bound_decreasing(eps in 1e-4f64..0.1, n in 1u64..1_000_000, e in 1e-3f64..=0.5) {
            let b = |eps, n| sampling_bound(eps, n, e).unwrap().probability;
            prop_assert!(b(eps * 1.01, n) <= b(eps, n));
            prop_assert!(b(eps, n + 10) <= b(eps, n));
            let (p0, p1) = (b(eps, n), b(eps * 1.01, n));
            if p0 > 1e-300 { prop_assert!(p1 < p0); }
        }

        #[test]
        fn key_rate_mirror_symmetry(q in 0.0f64..=1.0, ebx in 0.0f64..0.3, ebz in 0.0f64..0.3,
                                    fx in 1.0f64..2.0, fz in 1.0f64..2.0, ex in 0.0f64..0.1, ez in 0.0f64..0.1) {
            let p = KeyRateParams { q_a: q, q_b: q, e_bx: ebx, e_bz: ebz, f_x: fx, f_z: fz, eps_x: ex, eps_z: ez };
            let m = KeyRateParams { q_a: 1.0 - q, q_b: 1.0 - q, e_bx: ebz, e_bz: ebx, f_x: fz, f_z: fx, eps_x: ez, eps_z: ex };
            prop_assert!((key_rate(&p).unwrap().rate - key_rate(&m).unwrap().rate).abs() < 1e-12);
        }

        #[test]
        fn key_rate_without_deviation_is_asymptotic_form(q in 0.0f64..=1.0, ebx in 0.0f64..0.5, ebz in 0.0f64..0.5,
                                                         fx in 1.0f64..2.0, fz in 1.0f64..2.0) {
            let r = key_rate(&KeyRateParams::symmetric(q, ebx, ebz, fx, fz)).unwrap().rate;
            let asymptotic = (1.0 - q).powi(2) * (1.0 - fx * entropy_oracle(ebx) - entropy_oracle(ebz))
                + q * q * (1.0 - fz * entropy_oracle(ebz) - entropy_oracle(ebx));
            prop_assert!((r - asymptotic).abs() < 1e-12);
        }

        #[test]
        fn secure_length_monotone(leak_x in 0u64..500, leak_z in 0u64..500, ex in 0.0f64..0.05, ez in 0.0f64..0.05, d in 0.0f64..0.01) {
            let s = SecureLengthInput { n_xx: 5_000, n_zz: 20_000, e_bx: 0.05, e_bz: 0.01, eps_x: ex, eps_z: ez, leak_x, leak_z };
            let base = secure_length(&s).unwrap();
            let m = secure_length(&SecureLengthInput { leak_x: leak_x + 1, ..s }).unwrap();
            prop_assert!(m <= base);
            let m = secure_length(&SecureLengthInput { leak_z: leak_z + 1, ..s }).unwrap();
            prop_assert!(m <= base);
            let m = secure_length(&SecureLengthInput { eps_x: ex + d, ..s }).unwrap();
            prop_assert!(m <= base);
            let m = secure_length(&SecureLengthInput { eps_z: ez + d, ..s }).unwrap();
            prop_assert!(m <= base);
        }
    }

    #[test]
    fn optimum_nondecreasing_in_sample_size() {
        let mut last = f64::NEG_INFINITY;
        for n in [1e5, 3e5, 1e6, 3e6, 1e7, 3e7] {
            let r = optimize_bias(&OptimizeInput { n_total: n, ..fig1_input() }, BiasSearch::Symmetric).unwrap();
            assert!(r.best.rate >= last - 1e-12, "N = {n}: {} < {last}", r.best.rate);
            last = r.best.rate;
        }
    }
}
