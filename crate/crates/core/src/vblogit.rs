//! Variational Bayesian logistic regression.
//!
//! Three ways of fitting a Gaussian `q(β) = N(μ, LLᵀ)`:
//!
//! * [`fit_viper`] maximizes the bound `Σ y_i ϑ_i − η_l(ϑ_i, τ_i) − KL`,
//! * [`fit_vipg`] runs coordinate ascent on the Jaakkola–Jordan bound,
//! * [`fit_vimc`] maximizes a reparameterized Monte Carlo ELBO.
//!
//! The first and last share the ascent loop in [`crate::optim`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{
    jj_curvature, jj_expected_bound, BoundError, GaussianMoment, TruncationOrder, MIN_TAU,
};
use crate::dataset::LabeledDataset;
use crate::expect::SoftplusExpectation;
use crate::linalg::{
    cholesky_lower, kl_from_factors, lower_half_diag, solve_lower, solve_lower_vec,
    solve_upper_t, solve_upper_t_vec,
};
use crate::optim::{ascend, AscentProblem, AscentSettings, NonFiniteError};
use crate::par;
use crate::quadrature::GaussHermite;
use crate::seeding;
use crate::specfun::{sigmoid, softplus};

/// Diagonal variance of the starting point of every fit.
pub const INIT_VARIANCE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VbError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid scale factor: {0}")]
    InvalidScale(&'static str),
    #[error(transparent)]
    NonFinite(#[from] NonFiniteError),
    #[error("update matrix is singular at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Full,
    MeanField,
}

/// Search direction used by the gradient-based fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Gradient premultiplied by the Fisher metric of `(μ, L)`.
    #[default]
    Natural,
    /// The raw Euclidean gradient.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, VbError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(VbError::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(VbError::NotPositiveDefinite("prior covariance"));
        }
        let factor = cholesky_lower(&cov).ok_or(VbError::NotPositiveDefinite("prior covariance"))?;
        Ok(Self { mean, cov, factor })
    }

    /// `N(0, I_p)`.
    pub fn standard(p: usize) -> Self {
        Self { mean: DVector::zeros(p), cov: DMatrix::identity(p, p), factor: DMatrix::identity(p, p) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `S⁻¹ a` for a matrix `a`.
    fn precision_times(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        solve_upper_t(&self.factor, &solve_lower(&self.factor, a))
    }

    fn precision_times_vec(&self, a: &DVector<f64>) -> DVector<f64> {
        solve_upper_t_vec(&self.factor, &solve_lower_vec(&self.factor, a))
    }

    fn precision(&self) -> DMatrix<f64> {
        self.precision_times(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// `N(μ, LLᵀ)` with `L` lower triangular with positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGaussian {
    mu: DVector<f64>,
    scale: DMatrix<f64>,
    family: Family,
}

impl VariationalGaussian {
    pub fn new(mu: DVector<f64>, scale: DMatrix<f64>, family: Family) -> Result<Self, VbError> {
        let d = mu.len();
        if scale.nrows() != d || scale.ncols() != d {
            return Err(VbError::DimensionMismatch { expected: d, got: scale.nrows() });
        }
        if mu.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
            return Err(VbError::InvalidScale("non-finite entry"));
        }
        for j in 0..d {
            if scale[(j, j)] <= 0.0 {
                return Err(VbError::InvalidScale("diagonal must be positive"));
            }
            for i in 0..d {
                let off = scale[(i, j)] != 0.0;
                if off && i < j {
                    return Err(VbError::InvalidScale("factor must be lower triangular"));
                }
                if off && i != j && family == Family::MeanField {
                    return Err(VbError::InvalidScale("mean-field factor must be diagonal"));
                }
            }
        }
        Ok(Self { mu, scale, family })
    }

    /// Builds from a covariance matrix via its Cholesky factor.
    pub fn from_covariance(
        mu: DVector<f64>,
        cov: &DMatrix<f64>,
        family: Family,
    ) -> Result<Self, VbError> {
        let mut l = cholesky_lower(cov).ok_or(VbError::NotPositiveDefinite("covariance"))?;
        if family == Family::MeanField {
            l = DMatrix::from_diagonal(&l.diagonal());
        }
        Self::new(mu, l, family)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.scale * self.scale.transpose()
    }

    /// Marginal standard deviations `√Σ_jj`.
    pub fn marginal_sd(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.scale.row_iter().map(|r| r.norm()))
    }
}

pub fn gaussian_kl(q: &VariationalGaussian, p: &GaussianPrior) -> Result<f64, VbError> {
    if q.dim() != p.dim() {
        return Err(VbError::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    Ok(kl_from_factors(q.mu(), q.scale(), p.mean(), p.factor()).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub l: TruncationOrder,
    pub step_size: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub family: Family,
    pub direction: Direction,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            l: TruncationOrder::DEFAULT,
            step_size: 0.05,
            max_iters: 5000,
            rel_tol: 1e-7,
            mc_samples: 1000,
            seed: 0,
            family: Family::Full,
            direction: Direction::Natural,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), VbError> {
        if !(1e-10..=1e-2).contains(&self.rel_tol) {
            return Err(VbError::InvalidConfig(format!(
                "rel_tol {} outside [1e-10, 1e-2]",
                self.rel_tol
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(VbError::InvalidConfig(format!("step_size {} must be positive", self.step_size)));
        }
        if self.mc_samples < 2 {
            return Err(VbError::InvalidConfig("mc_samples must be at least 2".into()));
        }
        Ok(())
    }

    pub(crate) fn ascent_settings(&self, smoothing: Option<f64>) -> AscentSettings {
        AscentSettings {
            step_size: self.step_size,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            smoothing,
            ..AscentSettings::default()
        }
    }
}

/// Decay of the moving average used to stop Monte Carlo fits.
pub const MC_SMOOTHING: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub posterior: VariationalGaussian,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

fn check_dims(data: &LabeledDataset, p: usize) -> Result<(), VbError> {
    if data.p() != p {
        return Err(VbError::DimensionMismatch { expected: p, got: data.p() });
    }
    Ok(())
}

/// `(ϑ_i, τ_i)` for each row, with `τ_i = ‖Lᵀx_i‖` clamped below.
pub fn local_moments(
    data: &LabeledDataset,
    q: &VariationalGaussian,
) -> Result<Vec<GaussianMoment>, VbError> {
    check_dims(data, q.dim())?;
    let (theta, u) = projections(data.x(), q);
    Ok((0..data.n())
        .map(|i| GaussianMoment::clamped(theta[i], u.row(i).norm()))
        .collect())
}

fn projections(x: &DMatrix<f64>, q: &VariationalGaussian) -> (DVector<f64>, DMatrix<f64>) {
    (x * q.mu(), x * q.scale())
}

pub fn elbo_bound(
    data: &LabeledDataset,
    q: &VariationalGaussian,
    prior: &GaussianPrior,
    l: TruncationOrder,
) -> Result<f64, VbError> {
    check_dims(data, prior.dim())?;
    let kl = gaussian_kl(q, prior)?;
    let lik = SoftplusExpectation::Bound(l);
    let moments = local_moments(data, q)?;
    let y = data.y();
    Ok(par::sum(data.n(), |i| y[i] * moments[i].theta() - lik.value(i, moments[i])) - kl)
}

/// Jaakkola–Jordan bounded ELBO with per-observation parameters `t`.
pub fn elbo_jj(
    data: &LabeledDataset,
    q: &VariationalGaussian,
    prior: &GaussianPrior,
    t: &[f64],
) -> Result<f64, VbError> {
    let kl = gaussian_kl(q, prior)?;
    let moments = local_moments(data, q)?;
    let y = data.y();
    Ok(par::sum(data.n(), |i| y[i] * moments[i].theta() - jj_expected_bound(moments[i], t[i])) - kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte Carlo ELBO with `β = μ + Lz`, `z ~ N(0, I)`, and the exact KL.
pub fn elbo_mc(
    data: &LabeledDataset,
    q: &VariationalGaussian,
    prior: &GaussianPrior,
    n_samples: usize,
    seed: u64,
) -> Result<ElboEstimate, VbError> {
    if n_samples < 2 {
        return Err(VbError::InvalidConfig("n_samples must be at least 2".into()));
    }
    check_dims(data, prior.dim())?;
    let kl = gaussian_kl(q, prior)?;
    let p = q.dim();
    let mut rng = seeding::labelled_rng(seed, seeding::label::MC_EVAL, 0);
    let z: Vec<f64> = (0..n_samples * p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (theta, u) = projections(data.x(), q);
    let y = data.y();
    let loglik = par::map(n_samples, |s| {
        let zs = DVector::from_column_slice(&z[s * p..(s + 1) * p]);
        let f = &theta + &u * zs;
        f.iter().zip(y.iter()).map(|(&f, &y)| y * f - softplus(f)).sum::<f64>()
    });
    let k = n_samples as f64;
    let mean = loglik.iter().sum::<f64>() / k;
    let var = loglik.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(ElboEstimate { value: mean - kl, std_error: (var / k).sqrt() })
}

/// `E_q[s(xᵀβ)]` for every row of `x`, by 64-node Gauss–Hermite quadrature.
pub fn predict_proba(q: &VariationalGaussian, x: &DMatrix<f64>) -> Result<DVector<f64>, VbError> {
    if x.ncols() != q.dim() {
        return Err(VbError::DimensionMismatch { expected: q.dim(), got: x.ncols() });
    }
    let gh = GaussHermite::cached(64);
    let (theta, u) = projections(x, q);
    Ok(DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| gh.expectation(theta[i], u.row(i).norm(), sigmoid)),
    ))
}

/// Packs `(μ, L)` into a flat vector: `μ`, then the free entries of `L`
/// column by column (lower triangle, or diagonal for mean-field).
pub(crate) fn pack(mu: &DVector<f64>, l: &DMatrix<f64>, family: Family) -> DVector<f64> {
    let p = mu.len();
    let mut out: Vec<f64> = mu.iter().copied().collect();
    for j in 0..p {
        match family {
            Family::Full => out.extend((j..p).map(|i| l[(i, j)])),
            Family::MeanField => out.push(l[(j, j)]),
        }
    }
    DVector::from_vec(out)
}

pub(crate) fn unpack(x: &DVector<f64>, p: usize, family: Family) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_column_slice(&x.as_slice()[..p]);
    let mut l = DMatrix::zeros(p, p);
    let mut k = p;
    for j in 0..p {
        match family {
            Family::Full => {
                for i in j..p {
                    l[(i, j)] = x[k];
                    k += 1;
                }
            }
            Family::MeanField => {
                l[(j, j)] = x[k];
                k += 1;
            }
        }
    }
    (mu, l)
}

/// Ascent direction for `(μ, L)` given the Euclidean gradient.
pub(crate) fn direction(
    l: &DMatrix<f64>,
    g_mu: &DVector<f64>,
    g_l: &DMatrix<f64>,
    family: Family,
    kind: Direction,
) -> (DVector<f64>, DMatrix<f64>) {
    match kind {
        Direction::Gradient => (g_mu.clone(), g_l.clone()),
        Direction::Natural => {
            let d_mu = l * (l.transpose() * g_mu);
            let d_l = match family {
                Family::Full => l * lower_half_diag(&(l.transpose() * g_l)),
                Family::MeanField => DMatrix::from_diagonal(&DVector::from_iterator(
                    l.nrows(),
                    (0..l.nrows()).map(|j| 0.5 * l[(j, j)].powi(2) * g_l[(j, j)]),
                )),
            };
            (d_mu, d_l)
        }
    }
}

/// The bounded or sampled ELBO as a function of `(μ, L)`.
pub(crate) struct LogisticObjective<'a> {
    pub data: &'a LabeledDataset,
    pub prior: &'a GaussianPrior,
    pub family: Family,
    pub direction: Direction,
    pub lik: SoftplusExpectation,
    pub seed: u64,
    precision: DMatrix<f64>,
}

/// Value and Euclidean gradient of the objective.
pub(crate) struct Evaluated {
    pub value: f64,
    pub g_mu: DVector<f64>,
    pub g_l: DMatrix<f64>,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(
        data: &'a LabeledDataset,
        prior: &'a GaussianPrior,
        family: Family,
        direction: Direction,
        lik: SoftplusExpectation,
        seed: u64,
    ) -> Self {
        Self { data, prior, family, direction, lik, seed, precision: prior.precision() }
    }

    fn kl(&self, mu: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
        kl_from_factors(mu, l, self.prior.mean(), self.prior.factor())
    }

    fn feasible(l: &DMatrix<f64>) -> bool {
        (0..l.nrows()).all(|j| l[(j, j)] > 0.0)
    }

    pub fn value_at(&self, mu: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
        let x = self.data.x();
        let theta = x * mu;
        let u = x * l;
        let y = self.data.y();
        let lik = par::sum(self.data.n(), |i| {
            let m = GaussianMoment::clamped(theta[i], u.row(i).norm());
            y[i] * theta[i] - self.lik.value(i, m)
        });
        lik - self.kl(mu, l)
    }

    pub fn evaluate(&self, mu: &DVector<f64>, l: &DMatrix<f64>) -> Evaluated {
        let x = self.data.x();
        let theta = x * mu;
        let u = x * l;
        let y = self.data.y();
        let n = self.data.n();
        let terms = par::map(n, |i| {
            let raw = u.row(i).norm();
            let (v, gt, gs) = self.lik.value_and_gradient(i, GaussianMoment::clamped(theta[i], raw));
            let w = if raw < MIN_TAU { 0.0 } else { gs / raw };
            (y[i] * theta[i] - v, y[i] - gt, w)
        });
        let lik: f64 = terms.iter().map(|t| t.0).sum();
        let resid = DVector::from_iterator(n, terms.iter().map(|t| t.1));
        let w = DVector::from_iterator(n, terms.iter().map(|t| t.2));

        let centred = mu - self.prior.mean();
        let g_mu = x.transpose() * resid - &self.precision * centred;

        let mut wu = u;
        for (i, mut row) in wu.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut g_l = -(x.transpose() * wu) - &self.precision * l;
        for j in 0..l.nrows() {
            g_l[(j, j)] += 1.0 / l[(j, j)];
        }
        let g_l = match self.family {
            Family::Full => g_l.lower_triangle(),
            Family::MeanField => DMatrix::from_diagonal(&g_l.diagonal()),
        };
        Evaluated { value: lik - self.kl(mu, l), g_mu, g_l }
    }
}

impl AscentProblem for LogisticObjective<'_> {
    fn begin_iteration(&mut self, iteration: usize, _x: &DVector<f64>) {
        let n = self.data.n();
        let seed = self.seed;
        self.lik.refresh(n, seed, iteration);
    }

    fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
        let (mu, l) = unpack(x, self.prior.dim(), self.family);
        Self::feasible(&l).then(|| self.value_at(&mu, &l))
    }

    fn value_and_direction(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let (mu, l) = unpack(x, self.prior.dim(), self.family);
        if !Self::feasible(&l) {
            return None;
        }
        let e = self.evaluate(&mu, &l);
        let (d_mu, d_l) = direction(&l, &e.g_mu, &e.g_l, self.family, self.direction);
        Some((e.value, pack(&d_mu, &d_l, self.family)))
    }
}

/// Seeded standard-normal mean and `L = √0.35·I`.
pub fn initial_posterior(p: usize, family: Family, seed: u64) -> VariationalGaussian {
    let mut rng = seeding::labelled_rng(seed, seeding::label::INIT, 0);
    let mu = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
    let scale = DMatrix::identity(p, p) * INIT_VARIANCE.sqrt();
    VariationalGaussian { mu, scale, family }
}

fn fit_gradient(
    data: &LabeledDataset,
    prior: &GaussianPrior,
    config: &FitConfig,
    lik: SoftplusExpectation,
    smoothing: Option<f64>,
) -> Result<FitResult, VbError> {
    config.validate()?;
    check_dims(data, prior.dim())?;
    let start = Instant::now();
    let p = prior.dim();
    let init = initial_posterior(p, config.family, config.seed);
    let mut objective =
        LogisticObjective::new(data, prior, config.family, config.direction, lik, config.seed);
    let x0 = pack(init.mu(), init.scale(), config.family);
    let out = ascend(&mut objective, x0, &config.ascent_settings(smoothing))?;
    let (mu, scale) = unpack(&out.x, p, config.family);
    Ok(FitResult {
        posterior: VariationalGaussian::new(mu, scale, config.family)?,
        iterations: out.trace.len(),
        elbo_trace: out.trace,
        converged: out.converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Maximizes the truncated-series bound on the ELBO.
pub fn fit_viper(
    data: &LabeledDataset,
    prior: &GaussianPrior,
    config: &FitConfig,
) -> Result<FitResult, VbError> {
    fit_gradient(data, prior, config, SoftplusExpectation::Bound(config.l), None)
}

/// Stochastic ascent on the reparameterized Monte Carlo ELBO with fresh
/// draws every iteration; stops on a moving average of the noisy ELBO.
pub fn fit_vimc(
    data: &LabeledDataset,
    prior: &GaussianPrior,
    config: &FitConfig,
) -> Result<FitResult, VbError> {
    let lik = SoftplusExpectation::sampled(config.mc_samples);
    fit_gradient(data, prior, config, lik, Some(MC_SMOOTHING))
}

/// One coordinate-ascent sweep of the Jaakkola–Jordan updates: `Σ`, then
/// `μ`, then the refreshed `t`.
///
/// The expected bound carries `a(t)/2 · x²`, so the update precision is
/// `S⁻¹ + Σ_i a(t_i) x_i x_iᵀ`.
pub fn vipg_update(
    data: &LabeledDataset,
    prior: &GaussianPrior,
    q: &VariationalGaussian,
    t: &[f64],
    iteration: usize,
) -> Result<(VariationalGaussian, Vec<f64>), VbError> {
    let x = data.x();
    let p = prior.dim();
    let a = DVector::from_iterator(data.n(), t.iter().map(|&t| jj_curvature(t)));
    let mut xa = x.clone();
    for (i, mut row) in xa.row_iter_mut().enumerate() {
        row *= a[i];
    }
    let precision = prior.precision() + x.transpose() * xa;
    let half = data.y().map(|y| y - 0.5);
    let b = prior.precision_times_vec(prior.mean()) + x.transpose() * half;

    let q = match q.family() {
        Family::Full => {
            let pl = cholesky_lower(&precision).ok_or(VbError::Singular { iteration })?;
            let mu = solve_upper_t_vec(&pl, &solve_lower_vec(&pl, &b));
            let cov = solve_upper_t(&pl, &solve_lower(&pl, &DMatrix::identity(p, p)));
            let cov = (&cov + cov.transpose()) * 0.5;
            VariationalGaussian::from_covariance(mu, &cov, Family::Full)
                .map_err(|_| VbError::Singular { iteration })?
        }
        Family::MeanField => {
            if (0..p).any(|j| precision[(j, j)] <= 0.0) {
                return Err(VbError::Singular { iteration });
            }
            let mut mu = q.mu().clone();
            for j in 0..p {
                let off: f64 = (0..p).filter(|&k| k != j).map(|k| precision[(j, k)] * mu[k]).sum();
                mu[j] = (b[j] - off) / precision[(j, j)];
            }
            let sd = precision.diagonal().map(|d| 1.0 / d.sqrt());
            VariationalGaussian::new(mu, DMatrix::from_diagonal(&sd), Family::MeanField)?
        }
    };
    let t = jj_optimal_params(data, &q)?;
    Ok((q, t))
}

/// `t_i = √(x_iᵀ(Σ + μμᵀ)x_i)`.
pub fn jj_optimal_params(data: &LabeledDataset, q: &VariationalGaussian) -> Result<Vec<f64>, VbError> {
    Ok(local_moments(data, q)?
        .into_iter()
        .map(|m| m.theta().hypot(m.tau()))
        .collect())
}

/// Coordinate ascent on the Jaakkola–Jordan bounded ELBO.
pub fn fit_vipg(
    data: &LabeledDataset,
    prior: &GaussianPrior,
    config: &FitConfig,
) -> Result<FitResult, VbError> {
    config.validate()?;
    check_dims(data, prior.dim())?;
    let start = Instant::now();
    let mut q = initial_posterior(prior.dim(), config.family, config.seed);
    let mut t = jj_optimal_params(data, &q)?;
    let mut prev = elbo_jj(data, &q, prior, &t)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 0..config.max_iters {
        let (nq, nt) = vipg_update(data, prior, &q, &t, iteration)?;
        let f = elbo_jj(data, &nq, prior, &nt)?;
        if !f.is_finite() {
            return Err(NonFiniteError { iteration }.into());
        }
        q = nq;
        t = nt;
        trace.push(f);
        if ((f - prev) / prev).abs() < config.rel_tol {
            converged = true;
            break;
        }
        prev = f;
    }
    Ok(FitResult {
        posterior: q,
        iterations: trace.len(),
        elbo_trace: trace,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Euclidean gradient of the bounded ELBO at `q`, as `(∂/∂μ, ∂/∂L)`.
pub fn elbo_bound_gradient(
    data: &LabeledDataset,
    q: &VariationalGaussian,
    prior: &GaussianPrior,
    l: TruncationOrder,
) -> Result<(DVector<f64>, DMatrix<f64>), VbError> {
    check_dims(data, prior.dim())?;
    let obj = LogisticObjective::new(
        data,
        prior,
        q.family(),
        Direction::Gradient,
        SoftplusExpectation::Bound(l),
        0,
    );
    let e = obj.evaluate(q.mu(), q.scale());
    Ok((e.g_mu, e.g_l))
}
