//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{linalg::SymmetricEigen, Cholesky, DMatrix, Dyn};

use crate::error::{DynCovError, Result};

/// `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Clips negative eigenvalues of a symmetric matrix to `floor`.
/// Returns the repaired matrix and whether any eigenvalue was clipped.
pub fn clip_eigenvalues(a: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut clipped = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            clipped = true;
            floor
        } else {
            v
        }
    });
    if !clipped {
        return (symmetrize(a), false);
    }
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (symmetrize(&rebuilt), true)
}

/// Spectral condition number of a symmetric PSD matrix (infinite when singular).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `A^{-1/2}` for a symmetric positive-definite matrix.
pub fn inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(DynCovError::Factorization(
            "matrix is not positive definite".into(),
        ));
    }
    let v = &eig.eigenvectors;
    let d = eig.eigenvalues.map(|x| 1.0 / x.sqrt());
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

/// Cholesky factor of a covariance matrix. When the plain factorization fails
/// the matrix is repaired (eigenvalues clipped at zero plus a `1e-10` jitter)
/// and factorized again; the flag reports whether repair was needed.
pub fn robust_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(chol) = Cholesky::new(symmetrize(a)) {
        return Ok((chol, false));
    }
    let (mut repaired, _) = clip_eigenvalues(a, 0.0);
    for i in 0..repaired.nrows() {
        repaired[(i, i)] += 1e-10;
    }
    Cholesky::new(repaired)
        .map(|c| (c, true))
        .ok_or_else(|| DynCovError::Factorization("Cholesky failed after PSD repair".into()))
}

/// Explicit inverse of a symmetric positive-definite matrix through its
/// Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (chol, _) = robust_cholesky(a)?;
    Ok(chol.inverse())
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
