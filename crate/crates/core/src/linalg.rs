//! Small dense solvers shared by the M-steps and the initialization.

use nalgebra::{DMatrix, DVector};

use crate::basis::DesignMatrix;

/// Solves the symmetric positive semi-definite system `a * x = b`.
///
/// Uses a Cholesky factorization. When `a` is not numerically positive
/// definite a ridge of `1e-10 * trace(a) / d` is added to the diagonal and the
/// factorization retried; an SVD pseudo-inverse is the last resort.
pub fn solve_normal_equations(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let d = a.nrows();
    let ridge = 1e-10 * a.trace() / d as f64;
    if ridge > 0.0 && ridge.is_finite() {
        let mut regularized = a.clone();
        for i in 0..d {
            regularized[(i, i)] += ridge;
        }
        if let Some(chol) = regularized.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return x;
            }
        }
    }
    a.clone()
        .svd(true, true)
        .solve(b, 1e-12 * a.amax().max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DVector::zeros(d))
}

/// Ordinary least squares fit of one curve, `(X'X)^-1 X'y`.
pub fn ordinary_least_squares(design: &DesignMatrix, y: &DVector<f64>) -> DVector<f64> {
    let x = design.values();
    let xt = x.transpose();
    solve_normal_equations(&(&xt * x), &(&xt * y))
}
