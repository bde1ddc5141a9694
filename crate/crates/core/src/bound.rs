//! Upper bounds on `E[log(1 + exp(X))]` for `X ~ N(theta, tau²)`.
//!
//! The main bound is the alternating series
//!
//! ```text
//! eta_l = tau·phi(r) + theta·Phi(r) + sum_{k=1}^{2l-1} (-1)^{k-1} a_k,   r = theta / tau
//! a_k   = (1/k) [ e^{k theta + k² tau²/2} Phi(-r - k tau) + e^{-k theta + k² tau²/2} Phi(r - k tau) ]
//! ```
//!
//! obtained by splitting the expectation at `X = 0` and replacing
//! `log(1 + x)` on `[0, 1]` by its odd-order Maclaurin polynomial. Even
//! partial sums are lower bounds and odd ones upper bounds, and `a_k`
//! decays like `1/k²`.
//!
//! Each bracketed product equals `phi(r)·R(k tau ± r)` with `R` the Mills
//! ratio, which is how it is evaluated when the Mills argument is
//! non-negative. Otherwise the exponent `k tau (k tau ∓ 2r) / 2` is formed
//! directly and combined with `ln Phi`, so no term overflows.
//!
//! Also here: the Jaakkola–Jordan quadratic bound, and two reference
//! estimators (seeded Monte Carlo and Gauss–Hermite quadrature).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::GaussHermite;
use crate::specfun::{
    log_std_normal_cdf, mills_ratio, softplus, std_normal_cdf, std_normal_pdf,
};

/// Smallest standard deviation callers should pass; see [`GaussianMoment::clamped`].
pub const MIN_TAU: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BoundError {
    #[error("standard deviation must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("mean must be finite, got {0}")]
    InvalidTheta(f64),
    #[error("truncation order must be at least 1")]
    ZeroOrder,
    #[error("need at least {min} samples or nodes, got {got}")]
    TooFew { min: usize, got: usize },
}

/// Mean and standard deviation of a scalar Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoment {
    theta: f64,
    tau: f64,
}

impl GaussianMoment {
    pub fn new(theta: f64, tau: f64) -> Result<Self, BoundError> {
        if !theta.is_finite() {
            return Err(BoundError::InvalidTheta(theta));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(BoundError::InvalidTau(tau));
        }
        Ok(Self { theta, tau })
    }

    /// Builds a moment with `tau` raised to at least [`MIN_TAU`].
    ///
    /// # Panics
    /// If `theta` or `tau` is not finite.
    pub fn clamped(theta: f64, tau: f64) -> Self {
        assert!(theta.is_finite() && tau.is_finite(), "non-finite moment ({theta}, {tau})");
        Self { theta, tau: tau.max(MIN_TAU) }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// The same spread with the mean negated.
    pub fn reflected(&self) -> Self {
        Self { theta: -self.theta, tau: self.tau }
    }

    fn ratio(&self) -> f64 {
        self.theta / self.tau
    }
}

/// Number of retained series pairs `l`; the bound keeps `2l - 1` terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct TruncationOrder(u32);

impl TruncationOrder {
    pub const DEFAULT: TruncationOrder = TruncationOrder(12);

    pub fn new(l: u32) -> Result<Self, BoundError> {
        if l == 0 {
            Err(BoundError::ZeroOrder)
        } else {
            Ok(Self(l))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn terms(self) -> usize {
        2 * self.0 as usize - 1
    }
}

impl Default for TruncationOrder {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<u32> for TruncationOrder {
    type Error = BoundError;
    fn try_from(l: u32) -> Result<Self, BoundError> {
        Self::new(l)
    }
}

impl From<TruncationOrder> for u32 {
    fn from(l: TruncationOrder) -> u32 {
        l.0
    }
}

/// Partial derivatives of a bound with respect to `(theta, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundGradient {
    pub d_theta: f64,
    pub d_tau: f64,
}

/// `phi(r) * R(s)` where `R` is the Mills ratio.
///
/// For `s < 0`, `phi(r) / phi(s) = exp((s - r)(s + r) / 2)` and
/// `R(s) phi(s) = Phi(-s)`.
#[inline]
fn scaled_tail(r: f64, s: f64) -> f64 {
    if s >= 0.0 {
        std_normal_pdf(r) * mills_ratio(s)
    } else {
        (0.5 * (s - r) * (s + r) + log_std_normal_cdf(-s)).exp()
    }
}

/// The two products inside `a_k`, before the `1/k` factor.
#[inline]
fn term_pair(r: f64, k_tau: f64) -> (f64, f64) {
    (scaled_tail(r, k_tau + r), scaled_tail(r, k_tau - r))
}

/// `a_k`, the magnitude of the k-th series term. `k` must be at least 1.
pub fn term_a_k(m: GaussianMoment, k: u32) -> f64 {
    assert!(k >= 1, "series terms start at k = 1");
    let kf = k as f64;
    let (lo, hi) = term_pair(m.ratio(), kf * m.tau);
    (lo + hi) / kf
}

/// `tau·phi(theta/tau) + theta·Phi(theta/tau)`, which is `E[max(X, 0)]`.
pub fn leading_terms(m: GaussianMoment) -> f64 {
    let r = m.ratio();
    m.tau * std_normal_pdf(r) + m.theta * std_normal_cdf(r)
}

/// `S_K`: the leading terms plus the first `K` signed series terms.
pub fn partial_sum(m: GaussianMoment, k_max: usize) -> f64 {
    let r = m.ratio();
    let mut series = 0.0;
    for k in 1..=k_max {
        let kf = k as f64;
        let (lo, hi) = term_pair(r, kf * m.tau);
        let a = (lo + hi) / kf;
        if k % 2 == 1 {
            series += a;
        } else {
            series -= a;
        }
    }
    leading_terms(m) + series
}

/// `eta_l(theta, tau)`, an upper bound on `E[softplus(X)]`.
pub fn eta(m: GaussianMoment, l: TruncationOrder) -> f64 {
    partial_sum(m, l.terms())
}

/// `eta_l` together with its gradient, sharing the term evaluations.
///
/// With `T1, T2` the two products of term `k`:
/// `d/dtheta (T1 + T2) = k (T1 - T2)` and
/// `d/dtau (T1 + T2) = k² tau (T1 + T2) - 2k phi(r)`.
/// The leading terms differentiate to `(Phi(r), phi(r))`.
pub fn eta_with_gradient(m: GaussianMoment, l: TruncationOrder) -> (f64, BoundGradient) {
    let r = m.ratio();
    let pdf = std_normal_pdf(r);
    let cdf = std_normal_cdf(r);
    let mut value = m.tau * pdf + m.theta * cdf;
    let mut d_theta = cdf;
    let mut d_tau = pdf;
    for k in 1..=l.terms() {
        let kf = k as f64;
        let k_tau = kf * m.tau;
        let (lo, hi) = term_pair(r, k_tau);
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        value += sign * (lo + hi) / kf;
        d_theta += sign * (lo - hi);
        d_tau += sign * (k_tau * (lo + hi) - 2.0 * pdf);
    }
    (value, BoundGradient { d_theta, d_tau })
}

pub fn eta_gradient(m: GaussianMoment, l: TruncationOrder) -> BoundGradient {
    eta_with_gradient(m, l).1
}

/// `a(t) = (s(t) - 1/2) / t = tanh(t/2) / (2t)`, with `a(0) = 1/4`.
pub fn jj_curvature(t: f64) -> f64 {
    let t = t.abs();
    if t < 1e-4 {
        0.25 - t * t / 48.0
    } else {
        (0.5 * t).tanh() / (2.0 * t)
    }
}

/// Gaussian expectation of the Jaakkola–Jordan quadratic bound at `t`:
/// `-log s(t) + (theta + t)/2 + a(t)/2 · (theta² + tau² - t²)`.
pub fn jj_expected_bound(m: GaussianMoment, t: f64) -> f64 {
    let second_moment = m.theta * m.theta + m.tau * m.tau;
    softplus(-t) + 0.5 * (m.theta + t) + 0.5 * jj_curvature(t) * (second_moment - t * t)
}

/// The minimizing `t`, `sqrt(theta² + tau²)`.
pub fn jj_optimal_t(m: GaussianMoment) -> f64 {
    m.theta.hypot(m.tau)
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `E[softplus(X)]`.
///
/// The stream is `ChaCha8Rng::seed_from_u64(seed)` feeding `rand_distr`'s
/// ziggurat `StandardNormal`; `X_j = theta + tau·z_j`.
pub fn mc_expectation(
    m: GaussianMoment,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate, BoundError> {
    if n_samples < 2 {
        return Err(BoundError::TooFew { min: 2, got: n_samples });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for j in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = softplus(m.theta + m.tau * z);
        let delta = v - mean;
        mean += delta / (j + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(McEstimate { mean, std_error: (var / n_samples as f64).sqrt() })
}

/// Gauss–Hermite estimate of `E[softplus(X)]` with `n_nodes` nodes.
pub fn quad_expectation(m: GaussianMoment, n_nodes: usize) -> Result<f64, BoundError> {
    if n_nodes < 2 {
        return Err(BoundError::TooFew { min: 2, got: n_nodes });
    }
    Ok(GaussHermite::cached(n_nodes).expectation(m.theta, m.tau, softplus))
}
