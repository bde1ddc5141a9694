//! Evaluation metrics shared by all methods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::GaussianMoment;
use crate::linalg::kl_from_factors;
use crate::specfun::std_normal_quantile;
use crate::vblogit::VariationalGaussian;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("AUC needs both classes")]
    SingleClass,
    #[error("level {0} outside (0, 1)")]
    Level(f64),
}

/// Per-fit evaluation record. `None` marks a metric that does not apply,
/// e.g. KL columns when no Monte Carlo reference fit exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub elbo_mc: f64,
    pub elbo_mc_se: f64,
    /// `KL(q_ref ‖ q)` with the Monte Carlo fit as reference.
    pub kl_mc_fwd: Option<f64>,
    /// `KL(q ‖ q_ref)`.
    pub kl_mc_rev: Option<f64>,
    pub mse: Option<f64>,
    pub coverage: Option<f64>,
    pub ci_width: f64,
    pub auc: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

fn same_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    Ok(())
}

/// `(KL(q_ref ‖ q), KL(q ‖ q_ref))`.
pub fn kl_mc_gaussians(
    q_ref: &VariationalGaussian,
    q: &VariationalGaussian,
) -> Result<(f64, f64), MetricsError> {
    same_len(q_ref.dim(), q.dim())?;
    let fwd = kl_from_factors(q_ref.mu(), q_ref.scale(), q.mu(), q.scale());
    let rev = kl_from_factors(q.mu(), q.scale(), q_ref.mu(), q_ref.scale());
    Ok((fwd.max(0.0), rev.max(0.0)))
}

fn scalar_kl(a: GaussianMoment, b: GaussianMoment) -> f64 {
    let ratio = (a.tau() / b.tau()).powi(2);
    let shift = ((a.theta() - b.theta()) / b.tau()).powi(2);
    0.5 * (ratio + shift - 1.0 - ratio.ln())
}

/// KL between products of independent scalar Gaussians, both directions.
pub fn kl_marginals(
    reference: &[GaussianMoment],
    other: &[GaussianMoment],
) -> Result<(f64, f64), MetricsError> {
    same_len(reference.len(), other.len())?;
    let fwd = reference.iter().zip(other).map(|(&a, &b)| scalar_kl(a, b)).sum::<f64>();
    let rev = reference.iter().zip(other).map(|(&a, &b)| scalar_kl(b, a)).sum::<f64>();
    Ok((fwd.max(0.0), rev.max(0.0)))
}

pub fn mse_posterior_mean(theta: &[f64], f0: &[f64]) -> Result<f64, MetricsError> {
    same_len(theta.len(), f0.len())?;
    if theta.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(theta.iter().zip(f0).map(|(t, f)| (t - f).powi(2)).sum::<f64>() / theta.len() as f64)
}

/// Fraction of `f0` inside the equal-tailed intervals `ϑ ± z·τ` and the
/// mean interval width.
pub fn coverage_and_width(
    moments: &[GaussianMoment],
    f0: &[f64],
    level: f64,
) -> Result<(f64, f64), MetricsError> {
    same_len(moments.len(), f0.len())?;
    if moments.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::Level(level));
    }
    let z = std_normal_quantile(0.5 + 0.5 * level);
    let n = moments.len() as f64;
    let inside = moments
        .iter()
        .zip(f0)
        .filter(|(m, &f)| (f - m.theta()).abs() <= z * m.tau())
        .count();
    let width = 2.0 * z * moments.iter().map(|m| m.tau()).sum::<f64>() / n;
    Ok((inside as f64 / n, width))
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc(y: &[f64], scores: &[f64]) -> Result<f64, MetricsError> {
    same_len(y.len(), scores.len())?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied blocks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| y[k] == 1.0).count() as f64 * mid;
        i = j + 1;
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
    let n_neg = y.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Quantile of `values` at `prob`, interpolating linearly between order
/// statistics at position `prob·(n − 1)`.
pub fn quantile(values: &[f64], prob: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = prob.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

pub const SUMMARY_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

/// 2.5%, 50% and 97.5% quantiles.
pub fn quantile_summary(values: &[f64]) -> Result<[f64; 3], MetricsError> {
    Ok([
        quantile(values, SUMMARY_PROBS[0])?,
        quantile(values, SUMMARY_PROBS[1])?,
        quantile(values, SUMMARY_PROBS[2])?,
    ])
}
