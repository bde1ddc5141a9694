//! Labelled binary-classification data.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("design has {rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("latent vector has length {got}, expected {expected}")]
    LatentLength { got: usize, expected: usize },
    #[error("label {value} at row {row} is not 0 or 1")]
    BadLabel { row: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Design matrix `x` (n × p), labels in {0, 1}, and optionally the true
/// latent values `f0(x_i)` when the data were simulated.
///
/// An empty dataset (`n = 0`) is allowed; it makes the likelihood vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    f0: Option<DVector<f64>>,
}

impl LabeledDataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        f0: Option<DVector<f64>>,
    ) -> Result<Self, DatasetError> {
        if x.nrows() != y.len() {
            return Err(DatasetError::LengthMismatch { rows: x.nrows(), labels: y.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite("design matrix"));
        }
        if let Some((row, &value)) = y.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(DatasetError::BadLabel { row, value });
        }
        if let Some(f) = &f0 {
            if f.len() != y.len() {
                return Err(DatasetError::LatentLength { got: f.len(), expected: y.len() });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite("latent values"));
            }
        }
        Ok(Self { x, y, f0 })
    }

    /// A dataset with `n = 0` rows and `p` columns.
    pub fn empty(p: usize) -> Self {
        Self { x: DMatrix::zeros(0, p), y: DVector::zeros(0), f0: None }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn f0(&self) -> Option<&DVector<f64>> {
        self.f0.as_ref()
    }

    /// Rows `start..end`, keeping their order.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let len = end - start;
        Self {
            x: self.x.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
            f0: self.f0.as_ref().map(|f| f.rows(start, len).into_owned()),
        }
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` here.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(order),
            y: self.y.select_rows(order),
            f0: self.f0.as_ref().map(|f| f.select_rows(order)),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.p(), other.p(), "column counts differ");
        let n = self.n() + other.n();
        let x = DMatrix::from_fn(n, self.p(), |i, j| {
            if i < self.n() {
                self.x[(i, j)]
            } else {
                other.x[(i - self.n(), j)]
            }
        });
        let join = |a: &DVector<f64>, b: &DVector<f64>| {
            DVector::from_iterator(n, a.iter().chain(b.iter()).copied())
        };
        let f0 = match (&self.f0, &other.f0) {
            (Some(a), Some(b)) => Some(join(a, b)),
            _ => None,
        };
        Self { x, y: join(&self.y, &other.y), f0 }
    }
}
