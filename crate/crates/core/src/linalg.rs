//! Small dense helpers shared by the consensus and descent code.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Symmetric up to a tolerance scaled by the largest entry.
pub fn is_symmetric(m: &Matrix, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Solves `m x = rhs` for symmetric positive definite `m`, falling back to LU
/// when the Cholesky factorization fails.
pub fn solve_spd(m: &Matrix, rhs: &Vector) -> Option<Vector> {
    if let Some(chol) = m.clone().cholesky() {
        return Some(chol.solve(rhs));
    }
    m.clone().lu().solve(rhs)
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
