//! Cholesky factorization with strictly positive diagonal, and forward-mode
//! differentiation of the factor (Smith's recurrence).
//!
//! The scale matrices here are small — (m+p) by (m+p) — so a plain level-2
//! recurrence is used throughout.

use nalgebra::DMatrix;

use crate::error::{EivError, Result};

/// Lower-triangular factor `P` with positive diagonal such that `P P' = omega`.
///
/// Fails with the first non-positive pivot when `omega` is not positive
/// definite.
pub fn chol(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    chol_tagged(omega, "matrix", None)
}

/// Like [`chol`] but the error names the failing object and observation index.
pub(crate) fn chol_tagged(
    omega: &DMatrix<f64>,
    what: &'static str,
    index: Option<usize>,
) -> Result<DMatrix<f64>> {
    let n = omega.nrows();
    if omega.ncols() != n {
        return Err(EivError::Dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            omega.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = omega[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(EivError::NotPositiveDefinite { what, index, pivot: j });
        }
        let dj = diag.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = omega[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Directional derivatives of the Cholesky factor.
///
/// Given `P` from [`chol`] and the derivatives `domega[j]` of the input,
/// returns lower-triangular `dP[j]` satisfying
/// `dP[j] P' + P dP[j]' = domega[j]`, by differentiating the factorization
/// recurrence column by column.
pub fn chol_dtheta(p: &DMatrix<f64>, domega: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    domega.iter().map(|d| chol_dtheta_single(p, d)).collect()
}

/// Single-direction version of [`chol_dtheta`].
pub fn chol_dtheta_single(p: &DMatrix<f64>, domega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if domega.nrows() != n || domega.ncols() != n {
        return Err(EivError::Dimension(format!(
            "derivative must be {n}x{n}, got {}x{}",
            domega.nrows(),
            domega.ncols()
        )));
    }
    let mut dl = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        // Diagonal: dOmega[j][j] = 2 sum_{k<j} P[j][k] dP[j][k] + 2 P[j][j] dP[j][j].
        let mut s = domega[(j, j)];
        for k in 0..j {
            s -= 2.0 * p[(j, k)] * dl[(j, k)];
        }
        dl[(j, j)] = 0.5 * s / p[(j, j)];
        // Below-diagonal: dOmega[i][j] = sum_{k<j} (dP[i][k] P[j][k] + P[i][k] dP[j][k])
        //                               + dP[i][j] P[j][j] + P[i][j] dP[j][j].
        for i in (j + 1)..n {
            let mut s = domega[(i, j)];
            for k in 0..j {
                s -= dl[(i, k)] * p[(j, k)] + p[(i, k)] * dl[(j, k)];
            }
            s -= p[(i, j)] * dl[(j, j)];
            dl[(i, j)] = s / p[(j, j)];
        }
    }
    Ok(dl)
}

/// Factor and its parameter derivatives, bundled.
#[derive(Debug, Clone)]
pub struct CholPair {
    pub factor: DMatrix<f64>,
    pub dfactor: Vec<DMatrix<f64>>,
}

impl CholPair {
    pub fn new(omega: &DMatrix<f64>, domega: &[DMatrix<f64>]) -> Result<Self> {
        let factor = chol(omega)?;
        let dfactor = chol_dtheta(&factor, domega)?;
        Ok(Self { factor, dfactor })
    }
}

/// Solve `L x = b` for lower-triangular `L`.
pub(crate) fn forward_solve(l: &DMatrix<f64>, b: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= l[(i, k)] * v;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Symmetric inverse from a lower Cholesky factor: `(L L')^{-1}`.
pub(crate) fn inverse_from_chol(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Invert L (lower triangular), then form (L^{-1})' L^{-1}.
    let mut linv = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        for i in j..n {
            let mut s = linv[(i, j)];
            for k in j..i {
                s -= l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = s / l[(i, i)];
        }
    }
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[(k, i)] * linv[(k, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// `2 * sum(log diag(L))` — the log-determinant of `L L'`.
pub(crate) fn logdet_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}
