//! Minimal dense routines for the small symmetric matrices used by the
//! diversity kernels. Sizes here are subset sizes (tens of points), so a
//! plain Cholesky is all that is needed.

use ndarray::Array2;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Log-determinant of a symmetric positive definite matrix, `None` if the
/// Cholesky factorization fails.
pub(crate) fn logdet_spd(a: &Array2<f64>) -> Option<f64> {
    let l = cholesky(a)?;
    Some(2.0 * (0..a.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>())
}

/// Whether all eigenvalues are at least `-tol`, decided by attempting a
/// Cholesky factorization of `a + (tol + jitter) I`. The extra jitter absorbs
/// rounding on matrices with eigenvalues exactly at the boundary.
pub(crate) fn is_psd_within(a: &Array2<f64>, tol: f64) -> bool {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0_f64, f64::max);
    let shift = tol + 1e-12 * max_diag.max(1.0);
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[[i, i]] += shift;
    }
    cholesky(&shifted).is_some()
}
