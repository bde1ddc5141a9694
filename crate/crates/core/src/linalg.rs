//! Small dense helpers around Cholesky factors.

use nalgebra::{DMatrix, DVector};

/// Lower Cholesky factor of a symmetric matrix, or `None` if it is not
/// numerically positive definite.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.l())
}

/// Failed factorization: the smallest pivot seen and its index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotFailure {
    pub index: usize,
    pub pivot: f64,
}

/// Row-by-row Cholesky that reports the offending pivot when the matrix is
/// not numerically positive definite.
pub fn cholesky_checked(a: &DMatrix<f64>) -> Result<DMatrix<f64>, PivotFailure> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    let mut smallest = PivotFailure { index: 0, pivot: f64::INFINITY };
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < smallest.pivot {
            smallest = PivotFailure { index: j, pivot: d };
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(smallest);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with zero pivot")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with zero pivot")
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor with zero pivot")
}

pub fn solve_upper_t_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor with zero pivot")
}

/// `ln |L Lᵀ|` from the factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>()
}

/// `KL(N(mu0, L0 L0ᵀ) || N(mu1, L1 L1ᵀ))` from lower factors.
pub fn kl_from_factors(
    mu0: &DVector<f64>,
    l0: &DMatrix<f64>,
    mu1: &DVector<f64>,
    l1: &DMatrix<f64>,
) -> f64 {
    let d = mu0.len() as f64;
    let trace = solve_lower(l1, l0).norm_squared();
    let maha = solve_lower_vec(l1, &(mu0 - mu1)).norm_squared();
    0.5 * (log_det_from_factor(l1) - log_det_from_factor(l0) - d + trace + maha)
}

/// Keeps the lower triangle (including the diagonal), zeroing the rest.
pub fn lower_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.lower_triangle()
}

/// Lower triangle with the diagonal halved.
pub fn lower_half_diag(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.lower_triangle();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] *= 0.5;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kl() {
        let z = DVector::from_vec(vec![0.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let two = DMatrix::from_element(1, 1, 2.0);
        // KL(N(0,1) || N(0,4)) = (ln 4 + 1/4 - 1) / 2
        let want = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert!((kl_from_factors(&z, &one, &z, &two) - want).abs() < 1e-15);
        assert_eq!(kl_from_factors(&z, &two, &z, &two), 0.0);
    }

    #[test]
    fn checked_cholesky_names_pivot() {
        let b = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.1, 0.4, 0.1, 2.0]);
        let l = cholesky_checked(&b).unwrap();
        assert!((&l - cholesky_lower(&b).unwrap()).amax() < 1e-15);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let err = cholesky_checked(&a).unwrap_err();
        assert_eq!(err.index, 2);
        assert!(err.pivot.abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_lower(&a).is_none());
        let b = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_lower(&b).unwrap();
        assert!((&l * l.transpose() - b).norm() < 1e-14);
    }
}
