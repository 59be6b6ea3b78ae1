//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::Mat;

/// Symmetric part `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `H X = rhs` for symmetric positive-definite `H`.
///
/// Falls back to LU when the Cholesky factorization breaks down, which only
/// happens for matrices the callers have already flagged as ill-posed.
pub fn spd_solve(h: &Mat, rhs: &Mat) -> Option<Mat> {
    match Cholesky::new(symmetrize(h)) {
        Some(chol) => Some(chol.solve(rhs)),
        None => h.clone().lu().solve(rhs),
    }
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Column-major vectorization.
pub fn vec_of(m: &Mat) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.transpose())) <= tol
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Builds a matrix from row-major nested rows. Returns `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
