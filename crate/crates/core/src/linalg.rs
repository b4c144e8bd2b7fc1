//! Small dense linear-algebra helpers shared across modules.
//!
//! Everything here operates on matrices of dimension at most a few dozen, so
//! plain dense algorithms are used throughout.

use nalgebra::{DMatrix, DVector};

use crate::{LsaError, Result};

/// Largest absolute entry; used as the scale for pivot thresholds.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = max_abs(m).max(1e-300);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// LU solve with an explicit relative pivot check.
///
/// Fails with [`LsaError::SingularMatrix`] when any pivot falls below
/// `1e-14` times the largest entry of `a`.
pub fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let threshold = 1e-14 * max_abs(a).max(1e-300);
    let lu = a.clone().lu();
    let min_pivot = (0..a.nrows())
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot < threshold {
        return Err(LsaError::SingularMatrix {
            pivot: min_pivot,
            threshold,
        });
    }
    lu.solve(b).ok_or(LsaError::SingularMatrix {
        pivot: min_pivot,
        threshold,
    })
}

/// Multi-right-hand-side variant of [`solve_checked`].
pub fn solve_matrix_checked(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let threshold = 1e-14 * max_abs(a).max(1e-300);
    let lu = a.clone().lu();
    let min_pivot = (0..a.nrows())
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot < threshold {
        return Err(LsaError::SingularMatrix {
            pivot: min_pivot,
            threshold,
        });
    }
    lu.solve(b).ok_or(LsaError::SingularMatrix {
        pivot: min_pivot,
        threshold,
    })
}

/// Eigenvalue range (min, max) of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

pub fn sym_lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).0
}

/// Spectral norm.
///
/// Symmetric inputs go through an eigendecomposition; general inputs use
/// power iteration on `MᵀM` with a 1e-10 convergence tolerance and a 1e4
/// iteration cap.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    if is_symmetric(m, 1e-12) {
        let (lo, hi) = sym_eig_range(m);
        return lo.abs().max(hi.abs());
    }
    let gram = m.transpose() * m;
    let d = gram.nrows();
    // deterministic, non-degenerate start vector
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64) * 0.37);
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..10_000 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_symmetric(m, 1e-12) {
        return Err(LsaError::InvalidParameter(
            "matrix square root requires a symmetric input".into(),
        ));
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < 0.0 && min.abs() > 1e-14 * max_abs(m).max(1e-300) {
        return Err(LsaError::NotPositiveDefinite(min));
    }
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose())
}

/// Cholesky factor of an SPD matrix (lower triangular).
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| LsaError::NotPositiveDefinite(sym_lambda_min(m)))
}

/// True when every eigenvalue of `abar` has a strictly positive real part,
/// i.e. `-abar` is Hurwitz.
pub fn is_positive_stable(abar: &DMatrix<f64>) -> bool {
    abar.complex_eigenvalues().iter().all(|z| z.re > 0.0)
}

/// Numerical column rank via SVD.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    svd.singular_values
        .iter()
        .filter(|&&s| s > rel_tol * max_sv.max(1e-300))
        .count()
}
