//! Synthetic data generators and LIBSVM input/output.
//!
//! # LIBSVM grammar
//!
//! One observation per line: `label idx:value idx:value ...` separated by
//! whitespace. Indices are 1-based, strictly increasing within a line, and
//! absent indices are zero. Labels must form a subset of `{-1, +1}` (mapped
//! to `{0, 1}`) or of `{0, 1}`. Blank lines and lines starting with `#` are
//! skipped. The column count is the largest index seen.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LabeledDataset};
use crate::linalg::{cholesky_lower, solve_upper_t};
use crate::seeding;
use crate::specfun::sigmoid;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: labels {labels:?} are not binary (expected a subset of {{-1, 1}} or {{0, 1}})")]
    Labels { path: PathBuf, labels: Vec<f64> },
    #[error("{path}: no observations")]
    Empty { path: PathBuf },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid split fraction {0}")]
    Fraction(f64),
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

/// Covariate design of the logistic simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// Independent standard-normal covariates.
    Independent,
    /// AR(1)-type correlation `0.3^|i−j|`.
    Autoregressive,
    /// Rows `N(0, W⁻¹)` with a single `W ~ Wishart(p + 3, I)`.
    Wishart,
}

impl TryFrom<u8> for Setting {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Self::Independent),
            2 => Ok(Self::Autoregressive),
            3 => Ok(Self::Wishart),
            _ => Err(format!("setting must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        match s {
            Setting::Independent => 1,
            Setting::Autoregressive => 2,
            Setting::Wishart => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticSimSpec {
    pub n: usize,
    pub p: usize,
    pub setting: Setting,
    pub seed: u64,
}

impl Default for LogisticSimSpec {
    fn default() -> Self {
        Self { n: 1000, p: 25, setting: Setting::Wishart, seed: 0 }
    }
}

/// Lag correlation of the autoregressive setting.
pub const AR_RHO: f64 = 0.3;
/// Coefficient magnitudes are uniform on `[BETA_MIN, BETA_MAX]` with a
/// random sign.
pub const BETA_MIN: f64 = 0.2;
pub const BETA_MAX: f64 = 2.0;

/// Bartlett factor `A` with `A Aᵀ ~ Wishart(df, I_p)`.
fn bartlett_factor(p: usize, df: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("degrees of freedom above p - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    a
}

/// Simulated logistic-regression data and the true coefficients.
pub fn gen_logistic(spec: &LogisticSimSpec) -> Result<(LabeledDataset, DVector<f64>), DataError> {
    let LogisticSimSpec { n, p, setting, seed } = *spec;
    if n == 0 || p == 0 {
        return Err(DataError::Spec("n and p must be at least 1".into()));
    }
    let mut rng = seeding::labelled_rng(seed, seeding::label::DATA, 0);
    let beta = DVector::from_fn(p, |_, _| {
        let magnitude = rng.random_range(BETA_MIN..=BETA_MAX);
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    });
    let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let x = match setting {
        Setting::Independent => z,
        Setting::Autoregressive => {
            let cov = DMatrix::from_fn(p, p, |i, j| AR_RHO.powi(i.abs_diff(j) as i32));
            let c = cholesky_lower(&cov).expect("AR(1) correlation is positive definite");
            z * c.transpose()
        }
        Setting::Wishart => {
            // Rows x = A⁻ᵀ z have covariance (A Aᵀ)⁻¹ = W⁻¹.
            let a = bartlett_factor(p, (p + 3) as f64, &mut rng);
            solve_upper_t(&a, &z.transpose()).transpose()
        }
    };
    let f0 = &x * &beta;
    let y = f0.map(|f| if rng.random::<f64>() < sigmoid(f) { 1.0 } else { 0.0 });
    Ok((LabeledDataset::new(x, y, Some(f0))?, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpToySpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GpToySpec {
    fn default() -> Self {
        Self { n_train: 50, n_test: 50, seed: 0 }
    }
}

/// Latent function of the toy problem.
pub fn gp_toy_latent(x: f64) -> f64 {
    -4.5 * (std::f64::consts::FRAC_PI_2 * x).sin()
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 })
}

/// Training inputs: `⌈n·2.5/4⌉` evenly spaced points on `[0, 2.5]`, the
/// rest on `[3.5, 5]`, endpoints included.
pub fn gp_toy_train_inputs(n: usize) -> Vec<f64> {
    let first = (n as f64 * 2.5 / 4.0).ceil() as usize;
    linspace(0.0, 2.5, first).chain(linspace(3.5, 5.0, n - first)).collect()
}

/// Training and test sets for the one-dimensional toy classification
/// problem, with `y ~ Bernoulli(s(f0(x) + ε))`, `ε ~ N(0, 1)`.
pub fn gen_gp_toy(spec: &GpToySpec) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if spec.n_train < 2 || spec.n_test < 2 {
        return Err(DataError::Spec("n_train and n_test must be at least 2".into()));
    }
    let mut rng = seeding::labelled_rng(spec.seed, seeding::label::DATA, 1);
    let mut build = |xs: Vec<f64>| {
        let f0 = DVector::from_iterator(xs.len(), xs.iter().map(|&x| gp_toy_latent(x)));
        let y = f0.map(|f| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            if rng.random::<f64>() < sigmoid(f + eps) {
                1.0
            } else {
                0.0
            }
        });
        LabeledDataset::new(DMatrix::from_column_slice(xs.len(), 1, &xs), y, Some(f0))
    };
    let train = build(gp_toy_train_inputs(spec.n_train))?;
    let test = build(linspace(0.0, 5.0, spec.n_test).collect())?;
    Ok((train, test))
}

pub fn load_libsvm(path: &Path) -> Result<LabeledDataset, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_libsvm(&text, path)
}

fn parse_libsvm(text: &str, path: &Path) -> Result<LabeledDataset, DataError> {
    let malformed = |line: usize, message: String| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut p = 0;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| malformed(k + 1, format!("bad label {label_tok:?}")))?;
        let mut row = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| malformed(k + 1, format!("expected idx:value, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| malformed(k + 1, format!("bad index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| malformed(k + 1, format!("bad value {val:?}")))?;
            if idx <= last {
                return Err(malformed(k + 1, format!("index {idx} not increasing or below 1")));
            }
            if !val.is_finite() {
                return Err(malformed(k + 1, format!("non-finite value at index {idx}")));
            }
            last = idx;
            row.push((idx, val));
        }
        p = p.max(last);
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty { path: path.to_path_buf() });
    }
    let mut distinct = labels.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let signed = distinct.iter().all(|&v| v == -1.0 || v == 1.0);
    let binary = distinct.iter().all(|&v| v == 0.0 || v == 1.0);
    if !signed && !binary {
        return Err(DataError::Labels { path: path.to_path_buf(), labels: distinct });
    }
    let mut x = DMatrix::zeros(rows.len(), p);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            x[(i, j - 1)] = v;
        }
    }
    let y = DVector::from_iterator(labels.len(), labels.iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }));
    Ok(LabeledDataset::new(x, y, None)?)
}

/// Writes `data` with labels `0`/`1`. Zero entries are omitted except in the
/// last column, which is always written so the column count survives.
pub fn write_libsvm(path: &Path, data: &LabeledDataset) -> Result<(), DataError> {
    let mut out = String::new();
    let p = data.p();
    for i in 0..data.n() {
        out.push_str(if data.y()[i] == 1.0 { "1" } else { "0" });
        for j in 0..p {
            let v = data.x()[(i, j)];
            if v != 0.0 || j + 1 == p {
                write!(out, " {}:{:?}", j + 1, v).expect("writing to a string");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// The first `⌊fraction·n⌋` rows and the rest, in order.
pub fn train_test_split(
    data: &LabeledDataset,
    fraction: f64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let cut = (fraction * data.n() as f64).floor() as usize;
    Ok((data.slice(0, cut), data.slice(cut, data.n())))
}
