//! Small dense linear-algebra helpers shared by the GP and subspace code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter applied on the first factorization attempt.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a symmetric positive definite matrix plus the absolute
/// jitter that had to be added to its diagonal.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes `a + jitter * I`, starting at `1e-10 * mean(diag)` and growing
/// tenfold up to `1e-4 * mean(diag)`.
pub fn jittered_cholesky(a: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = a.nrows();
    if n == 0 || n != a.ncols() {
        return Err(Error::invalid(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mean_diag = a.diagonal().mean();
    if !mean_diag.is_finite() || mean_diag <= 0.0 {
        return Err(Error::Conditioning { jitter: 0.0 });
    }
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * mean_diag;
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::Conditioning { jitter });
        }
        rel = (rel * 10.0).min(JITTER_MAX);
    }
}

/// Largest entrywise deviation of `wᵀw` from the identity.
pub fn orthonormality_error(w: &DMatrix<f64>) -> f64 {
    let g = w.transpose() * w;
    let mut err = 0.0_f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((g[(i, j)] - target).abs());
        }
    }
    err
}

pub(crate) fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row(m, i)).collect()
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
