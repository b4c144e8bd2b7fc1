//! Deterministic covariance algebra for the averaged estimator.
//!
//! Everything here is a pure function of `Abar`, the noise covariance and the
//! step-size schedule. The averaging weight matrices are computed for all
//! indices at once by a backward suffix recursion in `O(n d^3)`; the naive
//! double sum is kept in tests as the correctness oracle.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Trajectory;
use crate::linalg;
use crate::schedule::StepSchedule;
use crate::series::{DistanceSeries, Metric, ReferenceLaw, SeriesPoint};
use crate::{LsaError, Result};

/// Deterministic product `prod_{l=m..=k} (I - alpha_l Abar)`, identity when
/// `m > k`; later factors are applied on the left.
pub fn mean_transition_product(
    abar: &DMatrix<f64>,
    schedule: &StepSchedule,
    m: u64,
    k: u64,
) -> DMatrix<f64> {
    let d = abar.nrows();
    let mut acc = DMatrix::identity(d, d);
    if m > k {
        return acc;
    }
    let eye = DMatrix::identity(d, d);
    for l in m..=k {
        let factor = &eye - schedule.step_size(l) * abar;
        acc = factor * acc;
    }
    acc
}

/// All averaging weight matrices `Q_1 .. Q_{n-1}` for horizon `n`.
///
/// `Q_l = alpha_l * sum_{j=l}^{n-1} prod_{i=l+1..=j} (I - alpha_i Abar)`,
/// computed by the backward recursion `S_{n-1} = I`,
/// `S_l = I + (I - alpha_{l+1} Abar) S_{l+1}`, `Q_l = alpha_l S_l`.
pub fn weight_matrices(abar: &DMatrix<f64>, schedule: &StepSchedule, n: u64) -> Vec<DMatrix<f64>> {
    let d = abar.nrows();
    let count = (n - 1) as usize;
    let mut out = vec![DMatrix::zeros(d, d); count];
    let eye = DMatrix::identity(d, d);
    let mut suffix = eye.clone();
    for l in (1..n).rev() {
        if l < n - 1 {
            let factor = &eye - schedule.step_size(l + 1) * abar;
            suffix = &eye + factor * suffix;
        }
        out[(l - 1) as usize] = schedule.step_size(l) * &suffix;
    }
    out
}

/// Single weight matrix `Q_ell` for horizon `n`.
pub fn weight_matrix(
    abar: &DMatrix<f64>,
    schedule: &StepSchedule,
    ell: u64,
    n: u64,
) -> Result<DMatrix<f64>> {
    if ell == 0 || ell >= n {
        return Err(LsaError::InvalidParameter(format!(
            "weight index must satisfy 1 <= ell <= n-1, got ell={ell}, n={n}"
        )));
    }
    let d = abar.nrows();
    let eye = DMatrix::identity(d, d);
    let mut suffix = eye.clone();
    for l in (ell..n - 1).rev() {
        let factor = &eye - schedule.step_size(l + 1) * abar;
        suffix = &eye + factor * suffix;
    }
    Ok(schedule.step_size(ell) * suffix)
}

/// Finite-horizon covariance of the scaled average:
/// `Sigma_n = n^{-1} sum_k Q_k Sigma_eps Q_k^T`.
pub fn sigma_n(
    abar: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    schedule: &StepSchedule,
    n: u64,
) -> DMatrix<f64> {
    let d = abar.nrows();
    let eye = DMatrix::identity(d, d);
    let mut suffix = eye.clone();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for l in (1..n).rev() {
        if l < n - 1 {
            let factor = &eye - schedule.step_size(l + 1) * abar;
            suffix = &eye + factor * suffix;
        }
        let q = schedule.step_size(l) * &suffix;
        acc += &q * sigma_eps * q.transpose();
    }
    acc /= n as f64;
    0.5 * (&acc + acc.transpose())
}

/// Asymptotic covariance `Abar^{-1} Sigma_eps Abar^{-T}`, symmetrised to
/// remove round-off asymmetry.
pub fn sigma_inf(abar: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = linalg::solve_matrix_checked(abar, sigma_eps)?; // Abar^{-1} Sigma
    let y = linalg::solve_matrix_checked(abar, &x.transpose())?; // Abar^{-1} (Abar^{-1} Sigma)^T
    let m = y.transpose();
    Ok(0.5 * (&m + m.transpose()))
}

/// Bootstrap plug-in covariance `n^{-1} sum_l Q_l eps_l eps_l^T Q_l^T` for a
/// recorded trajectory. Diagnostic only: it needs the recorded noises, which
/// exist exactly when the target is known.
pub fn sigma_n_boot(trajectory: &Trajectory, weights: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let noises = trajectory.noises.as_ref().ok_or(LsaError::MissingNoises)?;
    if weights.len() != noises.len() {
        return Err(LsaError::DimensionMismatch {
            expected: noises.len(),
            got: weights.len(),
        });
    }
    let d = trajectory.dim();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    let mut v = DVector::<f64>::zeros(d);
    for (q, eps) in weights.iter().zip(noises) {
        v.gemv(1.0, q, eps, 0.0);
        acc.ger(1.0, &v, &v, 1.0);
    }
    acc /= trajectory.n as f64;
    Ok(0.5 * (&acc + acc.transpose()))
}

/// `(n, |Sigma_n - Sigma_inf|)` over a horizon grid; the expected log-log
/// slope is `gamma - 1`.
pub fn covariance_gap_series(
    abar: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    schedule: &StepSchedule,
    n_grid: &[u64],
) -> Result<DistanceSeries> {
    if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid.iter().any(|&n| n < 2) {
        return Err(LsaError::InvalidParameter(
            "horizon grid must be strictly increasing with n >= 2".into(),
        ));
    }
    let s_inf = sigma_inf(abar, sigma_eps)?;
    let points: Vec<SeriesPoint> = n_grid
        .par_iter()
        .map(|&n| {
            let gap = linalg::spectral_norm(&(sigma_n(abar, sigma_eps, schedule, n) - &s_inf));
            SeriesPoint {
                n,
                distance: gap,
                std_err: 0.0,
            }
        })
        .collect();
    Ok(DistanceSeries::new(
        Metric::OperatorNorm,
        ReferenceLaw::SigmaInf,
        points,
    ))
}

/// Serializable summary of the finite-horizon/asymptotic covariance pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub n: u64,
    pub c0: f64,
    pub gamma: f64,
    pub k0: u64,
    /// Spectral-norm gap between the two matrices.
    pub gap: f64,
    pub lambda_min_n: f64,
    pub lambda_min_inf: f64,
    /// Row-major entries.
    pub sigma_n: Vec<Vec<f64>>,
    /// Row-major entries.
    pub sigma_inf: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn covariance_report(
    abar: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    schedule: &StepSchedule,
    n: u64,
) -> Result<CovarianceReport> {
    let s_n = sigma_n(abar, sigma_eps, schedule, n);
    let s_inf = sigma_inf(abar, sigma_eps)?;
    let gap = linalg::spectral_norm(&(&s_n - &s_inf));
    Ok(CovarianceReport {
        n,
        c0: schedule.c0(),
        gamma: schedule.gamma(),
        k0: schedule.k0(),
        gap,
        lambda_min_n: linalg::sym_lambda_min(&s_n),
        lambda_min_inf: linalg::sym_lambda_min(&s_inf),
        sigma_n: to_rows(&s_n),
        sigma_inf: to_rows(&s_inf),
    })
}

/// Empirical surrogate for the covariance-gap constant: `|Sigma_n - Sigma_inf|
/// * n^{1-gamma}` evaluated at the given horizon. Used by assumption checkers
/// when no analytic constant is supplied.
pub fn gap_constant_surrogate(
    abar: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    schedule: &StepSchedule,
    n: u64,
) -> Result<f64> {
    let s_inf = sigma_inf(abar, sigma_eps)?;
    let gap = linalg::spectral_norm(&(sigma_n(abar, sigma_eps, schedule, n) - s_inf));
    Ok(gap * (n as f64).powf(1.0 - schedule.gamma()))
}
