//! Per-observation estimates of `E[softplus(f)]`, `f ~ N(ϑ, τ²)`, together
//! with their derivatives in `ϑ` and `τ`.

use rand_distr::{Distribution, StandardNormal};

use crate::bound::{
    eta, eta_with_gradient, jj_curvature, jj_expected_bound, GaussianMoment, TruncationOrder,
};
use crate::par;
use crate::seeding;
use crate::specfun::softplus;

#[derive(Debug, Clone, PartialEq)]
pub enum SoftplusExpectation {
    /// The truncated-series upper bound of order `l`.
    Bound(TruncationOrder),
    /// Reparameterized Monte Carlo with `per_obs` standard-normal draws for
    /// every observation, refreshed by [`SoftplusExpectation::refresh`].
    Sampled { per_obs: usize, draws: Vec<f64> },
    /// The Jaakkola–Jordan quadratic bound with one parameter `t_i` per
    /// observation.
    Quadratic(Vec<f64>),
}

impl SoftplusExpectation {
    pub fn sampled(per_obs: usize) -> Self {
        Self::Sampled { per_obs, draws: Vec::new() }
    }

    /// Draws fresh normals for `n` observations from a stream keyed by
    /// `(seed, iteration)`. No-op for the other variants.
    pub fn refresh(&mut self, n: usize, seed: u64, iteration: usize) {
        if let Self::Sampled { per_obs, draws } = self {
            let s = *per_obs;
            let rows = par::map(n, |i| {
                let mut rng = seeding::labelled_rng(
                    seeding::derive_seed(seed, seeding::label::MC_FIT, iteration as u64),
                    i as u64,
                    0,
                );
                (0..s).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
            });
            *draws = rows.concat();
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        match self {
            Self::Sampled { per_obs, draws } => &draws[i * per_obs..(i + 1) * per_obs],
            _ => &[],
        }
    }

    pub fn value(&self, i: usize, m: GaussianMoment) -> f64 {
        match self {
            Self::Bound(l) => eta(m, *l),
            Self::Sampled { .. } => {
                let z = self.row(i);
                let s: f64 = z.iter().map(|&z| softplus(m.theta() + m.tau() * z)).sum();
                s / z.len() as f64
            }
            Self::Quadratic(t) => jj_expected_bound(m, t[i]),
        }
    }

    /// `(value, d/dϑ, d/dτ)`.
    pub fn value_and_gradient(&self, i: usize, m: GaussianMoment) -> (f64, f64, f64) {
        match self {
            Self::Bound(l) => {
                let (v, g) = eta_with_gradient(m, *l);
                (v, g.d_theta, g.d_tau)
            }
            Self::Sampled { .. } => {
                let z = self.row(i);
                let (mut v, mut gt, mut gs) = (0.0, 0.0, 0.0);
                for &z in z {
                    let (sp, s) = softplus_and_sigmoid(m.theta() + m.tau() * z);
                    v += sp;
                    gt += s;
                    gs += s * z;
                }
                let k = z.len() as f64;
                (v / k, gt / k, gs / k)
            }
            Self::Quadratic(t) => {
                let a = jj_curvature(t[i]);
                (jj_expected_bound(m, t[i]), 0.5 + a * m.theta(), a * m.tau())
            }
        }
    }
}

/// `(softplus(f), s(f))` sharing one exponential.
#[inline]
fn softplus_and_sigmoid(f: f64) -> (f64, f64) {
    let e = (-f.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if f >= 0.0 {
        (f + e.ln_1p(), r)
    } else {
        (e.ln_1p(), e * r)
    }
}
