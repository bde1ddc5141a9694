//! Reproducible experiment runs behind the command-line tool.
//!
//! Every task reads an [`ExperimentConfig`], runs its repeats (in parallel
//! when the `parallel` feature is on) and returns a report whose rows are
//! ordered by `(method, seed)`. Apart from the fields named `wall_time_s`
//! and `total_wall_time_s`, a report is a pure function of its config.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{eta, jj_expected_bound, jj_optimal_t, quad_expectation, GaussianMoment, TruncationOrder};
use crate::dataset::LabeledDataset;
use crate::datagen::{gen_gp_toy, gen_logistic, load_libsvm, train_test_split, DataError, GpToySpec, LogisticSimSpec};
use crate::metrics::{
    auc, coverage_and_width, kl_marginals, kl_mc_gaussians, mse_posterior_mean, quantile_summary,
    MetricsReport,
};
use crate::par;
use crate::vbgp::{self, GpError, GpOptions, SparseGPState};
use crate::vblogit::{self, FitConfig, FitResult, GaussianPrior, VbError};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "LOGISTIC_VB_WORKERS";
/// Relative-error thresholds of the bound-grid minimal-order columns.
pub const GRID_THRESHOLDS: [f64; 4] = [0.005, 0.01, 0.025, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    BoundGrid,
    LogisticSim,
    GpToy,
    FitFile,
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bound-grid" => Ok(Self::BoundGrid),
            "logistic-sim" => Ok(Self::LogisticSim),
            "gp-toy" => Ok(Self::GpToy),
            "fit-file" => Ok(Self::FitFile),
            _ => Err(format!("unknown task {s:?} (expected bound-grid, logistic-sim, gp-toy or fit-file)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BoundGrid => "bound-grid",
            Self::LogisticSim => "logistic-sim",
            Self::GpToy => "gp-toy",
            Self::FitFile => "fit-file",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Viper,
    Vipg,
    Vimc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Viper, Method::Vipg, Method::Vimc];
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "viper" => Ok(Self::Viper),
            "vipg" => Ok(Self::Vipg),
            "vimc" => Ok(Self::Vimc),
            _ => Err(format!("unknown method {s:?} (expected viper, vipg or vimc)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Viper => "viper",
            Self::Vipg => "vipg",
            Self::Vimc => "vimc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    /// JSON at the output path and CSV next to it.
    Both,
}

/// Model fitted by the `fit-file` task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    #[default]
    Logistic,
    Gp,
}

/// Evenly spaced values from `start` to `stop` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let h = (self.stop - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.start + i as f64 * h).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundGridSpec {
    pub theta: Axis,
    pub tau: Axis,
    /// Orders whose values and errors get their own columns.
    pub orders: Vec<u32>,
    /// Largest order tried when searching for the minimal one.
    pub max_order: u32,
    pub quad_nodes: usize,
}

impl Default for BoundGridSpec {
    fn default() -> Self {
        Self {
            theta: Axis { start: -3.0, stop: 3.0, count: 61 },
            tau: Axis { start: 0.1, stop: 3.0, count: 30 },
            orders: vec![12],
            max_order: 30,
            quad_nodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the task given on the command line.
    pub task: Option<Task>,
    pub methods: Vec<Method>,
    pub n_repeats: usize,
    /// Repeat `r` (1-based) uses seed `seed + r` for data, initialization
    /// and Monte Carlo streams.
    pub seed: u64,
    pub fit: FitConfig,
    /// Draws per ELBO evaluation.
    pub eval_samples: usize,
    pub level: f64,
    /// Prior `N(0, prior_variance · I)` for logistic fits.
    pub prior_variance: f64,
    /// Generator settings; `seed` is replaced by the per-repeat seed.
    pub logistic_sim: LogisticSimSpec,
    pub gp_toy: GpToySpec,
    pub gp: GpOptions,
    pub grid: BoundGridSpec,
    pub data_path: Option<PathBuf>,
    pub model: Model,
    pub train_fraction: f64,
    pub output_path: Option<PathBuf>,
    /// When unset, a `.csv` output path selects CSV and anything else JSON.
    pub output_format: Option<OutputFormat>,
    pub allow_nonconverged: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: None,
            methods: Method::ALL.to_vec(),
            n_repeats: 100,
            seed: 0,
            fit: FitConfig::default(),
            eval_samples: 10_000,
            level: 0.95,
            prior_variance: 1.0,
            logistic_sim: LogisticSimSpec::default(),
            gp_toy: GpToySpec::default(),
            gp: GpOptions::default(),
            grid: BoundGridSpec::default(),
            data_path: None,
            model: Model::Logistic,
            train_fraction: 0.8,
            output_path: None,
            output_format: None,
            allow_nonconverged: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Output { .. } => 1,
            Self::Data(_) => 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolved_output_format(&self) -> OutputFormat {
        self.output_format.unwrap_or_else(|| match &self.output_path {
            Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => OutputFormat::Csv,
            _ => OutputFormat::Json,
        })
    }

    pub fn validate(&self, task: Task) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if let Some(t) = self.task {
            if t != task {
                return Err(ExperimentError::Config(format!("config is for task {t}, not {task}")));
            }
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1");
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return bad("prior_variance must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.output_format == Some(OutputFormat::Both) && self.output_path.is_none() {
            return bad("output_format \"both\" needs an output path");
        }
        self.fit.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if task == Task::BoundGrid {
            let g = &self.grid;
            if g.theta.count == 0 || g.tau.count == 0 {
                return bad("grid axes need at least one point");
            }
            if g.tau.start <= 0.0 || g.tau.stop <= 0.0 {
                return bad("tau axis must be positive");
            }
            if g.max_order == 0 || g.orders.contains(&0) {
                return bad("orders must be at least 1");
            }
            if g.quad_nodes < 2 {
                return bad("quad_nodes must be at least 2");
            }
        }
        if task == Task::FitFile && self.data_path.is_none() {
            return bad("fit-file needs data_path");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    /// Set when the fit or its evaluation failed.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn converged(&self) -> bool {
        self.metrics.as_ref().is_some_and(|m| m.converged)
    }
}

/// 2.5%, 50% and 97.5% quantiles of one metric for one method, over the
/// runs where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: String,
    pub count: usize,
    pub q025: Option<f64>,
    pub median: Option<f64>,
    pub q975: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub library_version: String,
    pub task: Task,
    pub config: ExperimentConfig,
    /// KL columns hold `KL(q_vimc ‖ q)` (fwd) and `KL(q ‖ q_vimc)` (rev);
    /// for GP fits they sum scalar KLs of the latent marginals.
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub total_wall_time_s: f64,
}

impl ExperimentReport {
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(RunRecord::converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub theta: f64,
    pub tau: f64,
    /// Gauss–Hermite value of `E[softplus]`.
    pub quad: f64,
    /// Jaakkola–Jordan bound at its optimal parameter.
    pub jj: f64,
    pub jj_rel_err: f64,
    /// `η_l` for each configured order, in order.
    pub eta: Vec<f64>,
    pub eta_rel_err: Vec<f64>,
    /// Smallest order whose relative error is below each threshold, or
    /// `None` when `max_order` does not suffice.
    pub min_order: [Option<u32>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundGridReport {
    pub schema_version: u32,
    pub library_version: String,
    pub task: Task,
    pub config: ExperimentConfig,
    pub thresholds: [f64; 4],
    pub rows: Vec<GridRow>,
    /// Largest minimal order over the grid, per threshold.
    pub max_min_order: [Option<u32>; 4],
    pub total_wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Experiment(ExperimentReport),
    BoundGrid(BoundGridReport),
}

impl Report {
    /// Whether the run should exit with the non-convergence status.
    pub fn nonconverged(&self) -> bool {
        match self {
            Self::Experiment(r) => !r.config.allow_nonconverged && !r.all_converged(),
            Self::BoundGrid(_) => false,
        }
    }
}

fn library_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Runs `task` to completion.
pub fn run(task: Task, config: &ExperimentConfig) -> Result<Report, ExperimentError> {
    config.validate(task)?;
    Ok(match task {
        Task::BoundGrid => Report::BoundGrid(run_bound_grid(config)?),
        Task::LogisticSim => Report::Experiment(run_logistic_sim(config)?),
        Task::GpToy => Report::Experiment(run_gp_toy(config)?),
        Task::FitFile => Report::Experiment(run_fit_file(config)?),
    })
}

fn relative_error(v: f64, truth: f64) -> f64 {
    ((v - truth) / truth).abs()
}

/// One row of the bound grid.
pub fn grid_row(theta: f64, tau: f64, spec: &BoundGridSpec) -> Result<GridRow, ExperimentError> {
    let cfg = |e: crate::bound::BoundError| ExperimentError::Config(e.to_string());
    let m = GaussianMoment::new(theta, tau).map_err(cfg)?;
    let quad = quad_expectation(m, spec.quad_nodes).map_err(cfg)?;
    let jj = jj_expected_bound(m, jj_optimal_t(m));
    let mut eta_vals = Vec::with_capacity(spec.orders.len());
    for &l in &spec.orders {
        eta_vals.push(eta(m, TruncationOrder::new(l).map_err(cfg)?));
    }
    let mut min_order = [None; 4];
    for l in 1..=spec.max_order {
        if min_order.iter().all(Option::is_some) {
            break;
        }
        let err = relative_error(eta(m, TruncationOrder::new(l).map_err(cfg)?), quad);
        for (slot, &thr) in min_order.iter_mut().zip(GRID_THRESHOLDS.iter()) {
            if slot.is_none() && err < thr {
                *slot = Some(l);
            }
        }
    }
    Ok(GridRow {
        theta,
        tau,
        quad,
        jj,
        jj_rel_err: relative_error(jj, quad),
        eta_rel_err: eta_vals.iter().map(|&v| relative_error(v, quad)).collect(),
        eta: eta_vals,
        min_order,
    })
}

pub fn run_bound_grid(config: &ExperimentConfig) -> Result<BoundGridReport, ExperimentError> {
    let start = Instant::now();
    let spec = &config.grid;
    let thetas = spec.theta.values();
    let taus = spec.tau.values();
    let rows = par::map(thetas.len() * taus.len(), |k| {
        grid_row(thetas[k / taus.len()], taus[k % taus.len()], spec)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut max_min_order = [Some(0); 4];
    for row in &rows {
        for (acc, v) in max_min_order.iter_mut().zip(row.min_order) {
            *acc = match (*acc, v) {
                (Some(a), Some(b)) => Some(a.max(b)),
                _ => None,
            };
        }
    }
    Ok(BoundGridReport {
        schema_version: SCHEMA_VERSION,
        library_version: library_version(),
        task: Task::BoundGrid,
        config: config.clone(),
        thresholds: GRID_THRESHOLDS,
        rows,
        max_min_order,
        total_wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// A fitted model, reduced to what the metrics need.
enum Fitted {
    Logistic(FitResult),
    Gp(SparseGPState, FitResult),
}

impl Fitted {
    fn result(&self) -> &FitResult {
        match self {
            Self::Logistic(r) | Self::Gp(_, r) => r,
        }
    }
}

fn fit_logistic(method: Method, data: &LabeledDataset, prior: &GaussianPrior, cfg: &FitConfig) -> Result<Fitted, VbError> {
    let r = match method {
        Method::Viper => vblogit::fit_viper(data, prior, cfg)?,
        Method::Vipg => vblogit::fit_vipg(data, prior, cfg)?,
        Method::Vimc => vblogit::fit_vimc(data, prior, cfg)?,
    };
    Ok(Fitted::Logistic(r))
}

fn fit_gp(method: Method, data: &LabeledDataset, options: &GpOptions, cfg: &FitConfig) -> Result<Fitted, GpError> {
    let (s, r) = match method {
        Method::Viper => vbgp::fit_viper_gp(data, options, cfg)?,
        Method::Vipg => vbgp::fit_vipg_gp(data, options, cfg)?,
        Method::Vimc => vbgp::fit_vimc_gp(data, options, cfg)?,
    };
    Ok(Fitted::Gp(s, r))
}

/// Data for one repeat: training set (with `f0` when known) and the set
/// on which AUC is computed.
struct RepeatData {
    train: LabeledDataset,
    test: LabeledDataset,
}

fn evaluate(
    fitted: &Fitted,
    reference: Option<&Fitted>,
    data: &RepeatData,
    prior: Option<&GaussianPrior>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<MetricsReport, String> {
    let r = fitted.result();
    let s = |e: &dyn std::fmt::Display| e.to_string();
    let train = &data.train;
    let (elbo, moments, scores, kl) = match fitted {
        Fitted::Logistic(res) => {
            let prior = prior.expect("logistic fits carry a prior");
            let elbo = vblogit::elbo_mc(train, &res.posterior, prior, config.eval_samples, seed).map_err(|e| s(&e))?;
            let moments = vblogit::local_moments(train, &res.posterior).map_err(|e| s(&e))?;
            let scores = vblogit::predict_proba(&res.posterior, data.test.x()).map_err(|e| s(&e))?;
            let kl = match reference {
                Some(Fitted::Logistic(q_ref)) => {
                    Some(kl_mc_gaussians(&q_ref.posterior, &res.posterior).map_err(|e| s(&e))?)
                }
                _ => None,
            };
            (elbo, moments, scores, kl)
        }
        Fitted::Gp(state, _) => {
            let elbo = vbgp::elbo_mc_gp(state, train, config.eval_samples, seed).map_err(|e| s(&e))?;
            let moments = vbgp::q_f_moments(state, train.x()).map_err(|e| s(&e))?;
            let scores = vbgp::predict_proba_gp(state, data.test.x()).map_err(|e| s(&e))?;
            let kl = match reference {
                Some(Fitted::Gp(ref_state, _)) => {
                    let ref_moments = vbgp::q_f_moments(ref_state, train.x()).map_err(|e| s(&e))?;
                    Some(kl_marginals(&ref_moments, &moments).map_err(|e| s(&e))?)
                }
                _ => None,
            };
            (elbo, moments, scores, kl)
        }
    };
    let (coverage, mse) = match train.f0() {
        Some(f0) => {
            let theta: Vec<f64> = moments.iter().map(|m| m.theta()).collect();
            let (cov, _) = coverage_and_width(&moments, f0.as_slice(), config.level).map_err(|e| s(&e))?;
            (Some(cov), Some(mse_posterior_mean(&theta, f0.as_slice()).map_err(|e| s(&e))?))
        }
        None => (None, None),
    };
    let zeros = vec![0.0; moments.len()];
    let (_, width) = coverage_and_width(&moments, &zeros, config.level).map_err(|e| s(&e))?;
    Ok(MetricsReport {
        elbo_mc: elbo.value,
        elbo_mc_se: elbo.std_error,
        kl_mc_fwd: kl.map(|k| k.0),
        kl_mc_rev: kl.map(|k| k.1),
        mse,
        coverage,
        ci_width: width,
        // Undefined when the evaluation set has a single class.
        auc: auc(data.test.y().as_slice(), scores.as_slice()).ok(),
        iterations: r.iterations,
        converged: r.converged,
        wall_time_s: r.wall_time,
    })
}

/// Fits every method on one repeat's data and evaluates them.
fn run_repeat<E: fmt::Display>(
    config: &ExperimentConfig,
    seed: u64,
    data: &RepeatData,
    prior: Option<&GaussianPrior>,
    fit: impl Fn(Method, &FitConfig) -> Result<Fitted, E>,
) -> Vec<RunRecord> {
    let cfg = FitConfig { seed, ..config.fit.clone() };
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();
    let fits: Vec<(Method, Result<Fitted, String>)> =
        methods.iter().map(|&m| (m, fit(m, &cfg).map_err(|e| e.to_string()))).collect();
    let reference = fits.iter().find(|(m, _)| *m == Method::Vimc).and_then(|(_, f)| f.as_ref().ok());
    fits.iter()
        .map(|(method, fitted)| {
            let outcome = fitted
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|f| evaluate(f, reference, data, prior, config, seed));
            match outcome {
                Ok(m) => RunRecord { method: *method, seed, metrics: Some(m), error: None },
                Err(e) => RunRecord { method: *method, seed, metrics: None, error: Some(e) },
            }
        })
        .collect()
}

/// Runs `n_repeats` repeats with seeds `seed + 1, …` and assembles a report.
fn run_repeats(
    task: Task,
    config: &ExperimentConfig,
    repeat: impl Fn(u64) -> Result<Vec<RunRecord>, ExperimentError> + Sync + Send,
) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    let per_repeat = par::map(config.n_repeats, |r| repeat(config.seed.wrapping_add(r as u64 + 1)));
    let mut runs = Vec::new();
    for rows in per_repeat {
        runs.extend(rows?);
    }
    runs.sort_by_key(|r| (r.method, r.seed));
    let summary = summarize(&runs);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        library_version: library_version(),
        task,
        config: config.clone(),
        runs,
        summary,
        total_wall_time_s: start.elapsed().as_secs_f64(),
    })
}

const SUMMARY_METRICS: [&str; 9] =
    ["elbo_mc", "kl_mc_fwd", "kl_mc_rev", "mse", "coverage", "ci_width", "auc", "iterations", "wall_time_s"];

fn metric_value(m: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "elbo_mc" => Some(m.elbo_mc),
        "kl_mc_fwd" => m.kl_mc_fwd,
        "kl_mc_rev" => m.kl_mc_rev,
        "mse" => m.mse,
        "coverage" => m.coverage,
        "ci_width" => Some(m.ci_width),
        "auc" => m.auc,
        "iterations" => Some(m.iterations as f64),
        "wall_time_s" => Some(m.wall_time_s),
        _ => None,
    }
}

fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut methods: Vec<Method> = runs.iter().map(|r| r.method).collect();
    methods.dedup();
    let mut out = Vec::new();
    for method in methods {
        for name in SUMMARY_METRICS {
            let values: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.metrics.as_ref().and_then(|m| metric_value(m, name)))
                .filter(|v| v.is_finite())
                .collect();
            let q = quantile_summary(&values).ok();
            out.push(SummaryRow {
                method,
                metric: name.to_string(),
                count: values.len(),
                q025: q.map(|q| q[0]),
                median: q.map(|q| q[1]),
                q975: q.map(|q| q[2]),
            });
        }
    }
    out
}

fn prior_for(p: usize, variance: f64) -> Result<GaussianPrior, ExperimentError> {
    GaussianPrior::new(DVector::zeros(p), DMatrix::identity(p, p) * variance)
        .map_err(|e| ExperimentError::Config(e.to_string()))
}

/// Logistic simulation; AUC is computed in-sample.
pub fn run_logistic_sim(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let prior = prior_for(config.logistic_sim.p, config.prior_variance)?;
    run_repeats(Task::LogisticSim, config, |seed| {
        let spec = LogisticSimSpec { seed, ..config.logistic_sim };
        let (train, _) = gen_logistic(&spec)?;
        let data = RepeatData { test: train.clone(), train };
        Ok(run_repeat(config, seed, &data, Some(&prior), |m, cfg| fit_logistic(m, &data.train, &prior, cfg)))
    })
}

/// GP toy problem; coverage, width, MSE and KL on the training inputs,
/// AUC on the test grid.
pub fn run_gp_toy(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    run_repeats(Task::GpToy, config, |seed| {
        let (train, test) = gen_gp_toy(&GpToySpec { seed, ..config.gp_toy })?;
        let data = RepeatData { train, test };
        Ok(run_repeat(config, seed, &data, None, |m, cfg| fit_gp(m, &data.train, &config.gp, cfg)))
    })
}

/// LIBSVM file: the first `train_fraction` of the rows train, the rest
/// test. GP fits use `min(gp.inducing, n_train)` inducing points.
pub fn run_fit_file(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let path = config.data_path.as_deref().expect("validated");
    let data = load_libsvm(path)?;
    let (train, test) = train_test_split(&data, config.train_fraction)?;
    if train.n() == 0 || test.n() == 0 {
        return Err(DataError::Spec(format!(
            "{}: {} rows are too few to split at {}",
            path.display(),
            data.n(),
            config.train_fraction
        ))
        .into());
    }
    let data = RepeatData { train, test };
    match config.model {
        Model::Logistic => {
            let prior = prior_for(data.train.p(), config.prior_variance)?;
            run_repeats(Task::FitFile, config, |seed| {
                Ok(run_repeat(config, seed, &data, Some(&prior), |m, cfg| fit_logistic(m, &data.train, &prior, cfg)))
            })
        }
        Model::Gp => {
            let options = GpOptions { inducing: config.gp.inducing.min(data.train.n()), ..config.gp.clone() };
            run_repeats(Task::FitFile, config, |seed| {
                Ok(run_repeat(config, seed, &data, None, |m, cfg| fit_gp(m, &data.train, &options, cfg)))
            })
        }
    }
}

/// Float with 17 significant digits; empty for `None`.
fn csv_float(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.16e}"),
        _ => String::new(),
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tables making up the CSV form of a report: `(suffix, text)` pairs, the
/// first with an empty suffix.
pub fn csv_tables(report: &Report) -> Vec<(&'static str, String)> {
    match report {
        Report::Experiment(r) => {
            let mut runs = String::from(
                "method,seed,elbo_mc,elbo_mc_se,kl_mc_fwd,kl_mc_rev,mse,coverage,ci_width,auc,iterations,converged,wall_time_s,error\n",
            );
            for row in &r.runs {
                let m = row.metrics.as_ref();
                let cells = [
                    row.method.to_string(),
                    row.seed.to_string(),
                    csv_float(m.map(|m| m.elbo_mc)),
                    csv_float(m.map(|m| m.elbo_mc_se)),
                    csv_float(m.and_then(|m| m.kl_mc_fwd)),
                    csv_float(m.and_then(|m| m.kl_mc_rev)),
                    csv_float(m.and_then(|m| m.mse)),
                    csv_float(m.and_then(|m| m.coverage)),
                    csv_float(m.map(|m| m.ci_width)),
                    csv_float(m.and_then(|m| m.auc)),
                    m.map(|m| m.iterations.to_string()).unwrap_or_default(),
                    m.map(|m| m.converged.to_string()).unwrap_or_default(),
                    csv_float(m.map(|m| m.wall_time_s)),
                    csv_text(row.error.as_deref().unwrap_or("")),
                ];
                runs.push_str(&cells.join(","));
                runs.push('\n');
            }
            let mut summary = String::from("method,metric,count,q025,median,q975\n");
            for s in &r.summary {
                let cells = [
                    s.method.to_string(),
                    s.metric.clone(),
                    s.count.to_string(),
                    csv_float(s.q025),
                    csv_float(s.median),
                    csv_float(s.q975),
                ];
                summary.push_str(&cells.join(","));
                summary.push('\n');
            }
            vec![("", runs), ("_summary", summary)]
        }
        Report::BoundGrid(r) => {
            let mut head = vec!["theta".to_string(), "tau".into(), "quad".into(), "jj".into(), "jj_rel_err".into()];
            for l in &r.config.grid.orders {
                head.push(format!("eta_l{l}"));
                head.push(format!("rel_err_l{l}"));
            }
            for t in GRID_THRESHOLDS {
                head.push(format!("min_l_{}pct", t * 100.0));
            }
            let mut out = head.join(",");
            out.push('\n');
            for row in &r.rows {
                let mut cells = vec![
                    csv_float(Some(row.theta)),
                    csv_float(Some(row.tau)),
                    csv_float(Some(row.quad)),
                    csv_float(Some(row.jj)),
                    csv_float(Some(row.jj_rel_err)),
                ];
                for (v, e) in row.eta.iter().zip(&row.eta_rel_err) {
                    cells.push(csv_float(Some(*v)));
                    cells.push(csv_float(Some(*e)));
                }
                cells.extend(row.min_order.iter().map(|l| l.map(|l| l.to_string()).unwrap_or_default()));
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            vec![("", out)]
        }
    }
}

pub fn to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

/// `path` with `suffix` inserted before the extension and the extension
/// replaced by `ext`.
fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Output { path: path.to_path_buf(), source })
}

/// Writes the report per `output_path` and `output_format`; without a path
/// the primary table goes to `out`.
pub fn write_report(report: &Report, config: &ExperimentConfig, out: &mut impl Write) -> Result<(), ExperimentError> {
    let stdout_err = |source| ExperimentError::Output { path: PathBuf::from("<stdout>"), source };
    match (&config.output_path, config.resolved_output_format()) {
        (None, OutputFormat::Json) => out.write_all(to_json(report).as_bytes()).map_err(stdout_err),
        (None, _) => out.write_all(csv_tables(report)[0].1.as_bytes()).map_err(stdout_err),
        (Some(path), format) => {
            if format != OutputFormat::Csv {
                write_file(path, &to_json(report))?;
            }
            if format != OutputFormat::Json {
                for (i, (suffix, text)) in csv_tables(report).into_iter().enumerate() {
                    let target = if format == OutputFormat::Csv && i == 0 { path.clone() } else { sibling(path, suffix, "csv") };
                    write_file(&target, &text)?;
                }
            }
            Ok(())
        }
    }
}
