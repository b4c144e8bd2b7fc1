//! Step-size schedules, Lyapunov stability constants, and assumption checkers.
//!
//! Checkers never abort anything: the formal sample-size and offset
//! constraints are far beyond desk scale, so they are evaluated and reported
//! while experiments proceed regardless.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{LsaError, Result};

/// Polynomially decaying step sizes `alpha_k = c0 / (k + k0)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    c0: f64,
    gamma: f64,
    k0: u64,
}

impl StepSchedule {
    /// Validates `c0 > 0` and `gamma` in the open interval `(1/2, 1)`;
    /// the boundary cases need separate treatment and are rejected.
    pub fn new(c0: f64, gamma: f64, k0: u64) -> Result<Self> {
        if !(c0 > 0.0) {
            return Err(LsaError::InvalidParameter(format!(
                "c0 must be positive, got {c0}"
            )));
        }
        if !(gamma > 0.5 && gamma < 1.0) {
            return Err(LsaError::InvalidParameter(format!(
                "gamma must lie in (1/2, 1), got {gamma}"
            )));
        }
        Ok(Self { c0, gamma, k0 })
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn k0(&self) -> u64 {
        self.k0
    }

    /// `alpha_k = c0 (k + k0)^(-gamma)`. Defined for `k = 0` as well, which
    /// only occurs with `k0 >= 1`.
    pub fn step_size(&self, k: u64) -> f64 {
        let base = (k + self.k0) as f64;
        self.c0 * base.powf(-self.gamma)
    }
}

/// Free-standing form of [`StepSchedule::step_size`].
pub fn step_size(schedule: &StepSchedule, k: u64) -> f64 {
    schedule.step_size(k)
}

/// Lyapunov-derived quantities controlling the contraction of
/// `I - alpha * Abar` in the `Q`-weighted norm.
#[derive(Debug, Clone)]
pub struct StabilityConstants {
    pub q: DMatrix<f64>,
    /// Contraction rate: `|I - alpha Abar|_Q^2 <= 1 - a alpha`.
    pub a: f64,
    /// Largest admissible step size.
    pub alpha_inf: f64,
    /// Condition number of `Q`.
    pub kappa_q: f64,
    /// `sqrt(kappa_Q) * bound_a`.
    pub b_q: f64,
    /// `Q`-weighted operator norm of `Abar`.
    pub norm_abar_q: f64,
    pub lambda_min_q: f64,
    pub lambda_max_q: f64,
}

/// Solve the Lyapunov equation `Abarᵀ Q + Q Abar = P` for SPD `Q` by
/// vectorising to a `d² x d²` linear system (dimensions here are small).
pub fn lyapunov_solve(abar: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = abar.nrows();
    if p.nrows() != d || p.ncols() != d {
        return Err(LsaError::DimensionMismatch {
            expected: d,
            got: p.nrows(),
        });
    }
    if !linalg::is_symmetric(p, 1e-12) {
        return Err(LsaError::InvalidParameter(
            "Lyapunov right-hand side must be symmetric".into(),
        ));
    }
    // vec(Abarᵀ Q) = (I ⊗ Abarᵀ) vec(Q); vec(Q Abar) = (Abarᵀ ⊗ I) vec(Q).
    let at = abar.transpose();
    let mut system = DMatrix::<f64>::zeros(d * d, d * d);
    for col in 0..d {
        for row in 0..d {
            let eq = col * d + row; // column-major vec index
            for k in 0..d {
                system[(eq, col * d + k)] += at[(row, k)];
                system[(eq, k * d + row)] += at[(col, k)];
            }
        }
    }
    let rhs = DMatrix::from_fn(d * d, 1, |i, _| p[(i % d, i / d)]);
    let sol = linalg::solve_matrix_checked(&system, &rhs)
        .map_err(|_| LsaError::NotHurwitz("vectorised Lyapunov system is singular".into()))?;
    let mut q = DMatrix::from_fn(d, d, |i, j| sol[(j * d + i, 0)]);
    q = 0.5 * (&q + q.transpose());

    let residual = linalg::spectral_norm(&(&at * &q + &q * abar - p));
    if residual > 1e-10 * linalg::spectral_norm(p) {
        return Err(LsaError::NotHurwitz(format!(
            "Lyapunov residual {residual:.3e} too large"
        )));
    }
    let lam_min = linalg::sym_lambda_min(&q);
    if lam_min <= 0.0 {
        return Err(LsaError::NotPositiveDefinite(lam_min));
    }
    Ok(q)
}

/// Stability constants for `abar` under Lyapunov weight `P` (identity when
/// `None`) and observation bound `bound_a`.
pub fn stability_constants(
    abar: &DMatrix<f64>,
    p: Option<&DMatrix<f64>>,
    bound_a: f64,
) -> Result<StabilityConstants> {
    let d = abar.nrows();
    let identity;
    let p = match p {
        Some(m) => m,
        None => {
            identity = DMatrix::identity(d, d);
            &identity
        }
    };
    let q = lyapunov_solve(abar, p)?;
    let (lambda_min_q, lambda_max_q) = linalg::sym_eig_range(&q);
    let (lambda_min_p, _) = linalg::sym_eig_range(p);
    let kappa_q = lambda_max_q / lambda_min_q;
    let a = lambda_min_p / (2.0 * lambda_max_q);

    let sqrt_q = linalg::spd_sqrt(&q)?;
    let sqrt_q_inv = linalg::solve_matrix_checked(&sqrt_q, &DMatrix::identity(d, d))?;
    let norm_abar_q = linalg::spectral_norm(&(&sqrt_q * abar * &sqrt_q_inv));

    let alpha_inf = (lambda_min_p / (2.0 * kappa_q * norm_abar_q * norm_abar_q))
        .min(lambda_max_q / lambda_min_p);

    Ok(StabilityConstants {
        q,
        a,
        alpha_inf,
        kappa_q,
        b_q: kappa_q.sqrt() * bound_a,
        norm_abar_q,
        lambda_min_q,
        lambda_max_q,
    })
}

/// `Q`-weighted operator norm `|M|_Q = |Q^{1/2} M Q^{-1/2}|`.
pub fn q_weighted_norm(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let d = q.nrows();
    let sqrt_q = linalg::spd_sqrt(q)?;
    let sqrt_q_inv = linalg::solve_matrix_checked(&sqrt_q, &DMatrix::identity(d, d))?;
    Ok(linalg::spectral_norm(&(&sqrt_q * m * &sqrt_q_inv)))
}

/// One checked inequality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub required: f64,
    pub actual: f64,
    pub satisfied: bool,
}

/// Outcome of an assumption check; `passed` is the conjunction of all
/// condition flags. Reports annotate runs, they never stop them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub passed: bool,
    pub conditions: Vec<Condition>,
}

impl AssumptionReport {
    fn from_conditions(conditions: Vec<Condition>) -> Self {
        let passed = conditions.iter().all(|c| c.satisfied);
        Self { passed, conditions }
    }

    pub fn failing(&self) -> Vec<&str> {
        self.conditions
            .iter()
            .filter(|c| !c.satisfied)
            .map(|c| c.name.as_str())
            .collect()
    }
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self
            .conditions
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(4)
            .max(9);
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>14}  {}",
            "condition",
            "required",
            "actual",
            "ok",
            width = width
        )?;
        for c in &self.conditions {
            writeln!(
                f,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {}",
                c.name,
                c.required,
                c.actual,
                if c.satisfied { "yes" } else { "NO" },
                width = width
            )?;
        }
        write!(f, "overall: {}", if self.passed { "pass" } else { "FAIL" })
    }
}

/// Moment order used by the step-size condition: `max(p, ln d, 2)`.
pub fn effective_p(p: f64, d: usize) -> f64 {
    p.max((d as f64).ln()).max(2.0)
}

/// Step-size admissibility: `c0` within `(0, alpha_inf]` and the offset `k0`
/// above both polynomial thresholds at moment order `p` (floored at 2).
pub fn check_step_size(
    schedule: &StepSchedule,
    consts: &StabilityConstants,
    p: f64,
) -> AssumptionReport {
    let p = p.max(2.0);
    let a = consts.a;
    let c0 = schedule.c0();
    let gamma = schedule.gamma();
    let k0 = schedule.k0() as f64;

    let k0_poly = (16.0 / (a * c0)).powf(1.0 / (1.0 - gamma));
    let k0_moment = (2.0 * p * consts.kappa_q * (consts.b_q / consts.kappa_q.sqrt()).powi(2)
        / (a * c0))
        .powf(1.0 / gamma);

    AssumptionReport::from_conditions(vec![
        Condition {
            name: "c0 <= alpha_inf".into(),
            required: consts.alpha_inf,
            actual: c0,
            satisfied: c0 <= consts.alpha_inf,
        },
        Condition {
            name: "k0 >= (16/(a c0))^(1/(1-gamma))".into(),
            required: k0_poly,
            actual: k0,
            satisfied: k0 >= k0_poly,
        },
        Condition {
            name: "k0 >= (2 p kappa_Q bA^2/(a c0))^(1/gamma)".into(),
            required: k0_moment,
            actual: k0,
            satisfied: k0 >= k0_moment,
        },
    ])
}

/// Concentration block length `h(n)` used by the bootstrap offset
/// conditions, before rounding up.
pub fn block_size_value(n: u64, d: usize, consts: &StabilityConstants, schedule: &StepSchedule) -> f64 {
    let bound_a = consts.b_q / consts.kappa_q.sqrt();
    let log_term = 1.0 + 2.0 * (10.0 * (n as f64).powi(3) * d as f64).ln();
    let base = 8.0 * bound_a * consts.kappa_q.sqrt() * log_term
        / (consts.a * (2.0 - 2f64.powf(schedule.gamma())));
    base * base
}

/// `h(n)`: the ceiling of [`block_size_value`], saturating on overflow.
pub fn block_size_h(n: u64, d: usize, consts: &StabilityConstants, schedule: &StepSchedule) -> u64 {
    let v = block_size_value(n, d, consts, schedule).ceil();
    if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v.max(1.0) as u64
    }
}

/// Operator-norm bound on the averaging weight matrices:
/// `sqrt(kappa_Q) (c0 + 2/(a(1-gamma)))`.
pub fn weight_norm_bound(consts: &StabilityConstants, schedule: &StepSchedule) -> f64 {
    consts.kappa_q.sqrt() * (schedule.c0() + 2.0 / (consts.a * (1.0 - schedule.gamma())))
}

/// Bootstrap-specific admissibility: the four offset conditions on `k0^gamma`
/// (with the block length `h(n)`), the minimum-eigenvalue sample-size
/// condition, and — when a covariance-gap constant is supplied — the
/// `n^{1-gamma}` sample-size condition.
#[allow(clippy::too_many_arguments)]
pub fn check_bootstrap_assumptions(
    schedule: &StepSchedule,
    consts: &StabilityConstants,
    n: u64,
    d: usize,
    noise_sup: f64,
    lambda_min_sigma_inf: f64,
    c_q_bound: f64,
    sigma_gap_constant: Option<f64>,
) -> AssumptionReport {
    let a = consts.a;
    let c0 = schedule.c0();
    let gamma = schedule.gamma();
    let k0_pow = (schedule.k0() as f64).powf(gamma);
    let h = block_size_value(n, d, consts, schedule).ceil();
    let bound_a = consts.b_q / consts.kappa_q.sqrt();
    let nf = n as f64;

    let mut conditions = vec![
        Condition {
            name: "k0^gamma >= 2 h(n) bA sqrt(kappa_Q)".into(),
            required: 2.0 * h * bound_a * consts.kappa_q.sqrt(),
            actual: k0_pow,
            satisfied: k0_pow >= 2.0 * h * bound_a * consts.kappa_q.sqrt(),
        },
        Condition {
            name: "k0^gamma >= c0 h(n)/min(1, alpha_inf)".into(),
            required: c0 * h / consts.alpha_inf.min(1.0),
            actual: k0_pow,
            satisfied: k0_pow >= c0 * h / consts.alpha_inf.min(1.0),
        },
        Condition {
            name: "k0^gamma >= 8 bA^2 c0 sqrt(kappa_Q) e h(n)/(a(2-2^gamma))".into(),
            required: 8.0 * bound_a * bound_a * c0 * consts.kappa_q.sqrt() * std::f64::consts::E
                * h
                / (a * (2.0 - 2f64.powf(gamma))),
            actual: k0_pow,
            satisfied: k0_pow
                >= 8.0 * bound_a * bound_a * c0 * consts.kappa_q.sqrt() * std::f64::consts::E * h
                    / (a * (2.0 - 2f64.powf(gamma))),
        },
        Condition {
            name: "k0^gamma >= c0 ln^2(5n)/min(1, a)".into(),
            required: c0 * (5.0 * nf).ln().powi(2) / a.min(1.0),
            actual: k0_pow,
            satisfied: k0_pow >= c0 * (5.0 * nf).ln().powi(2) / a.min(1.0),
        },
    ];

    // lambda_min(Sigma_inf) >= 8 sqrt(2) |eps|^2 C^2 sqrt(ln(10 d n))/sqrt(n)
    //                        + 8 |eps|^2 C^2 ln(10 d n)/(3 n)
    let log_dn = (10.0 * d as f64 * nf).ln();
    let lhs = lambda_min_sigma_inf;
    let rhs = 8.0 * 2f64.sqrt() * noise_sup.powi(2) * c_q_bound.powi(2) * log_dn.sqrt() / nf.sqrt()
        + 8.0 * noise_sup.powi(2) * c_q_bound.powi(2) * log_dn / (3.0 * nf);
    conditions.push(Condition {
        name: "lambda_min(Sigma_inf) >= bootstrap covariance deviation bound".into(),
        required: rhs,
        actual: lhs,
        satisfied: lhs >= rhs,
    });

    conditions.push(Condition {
        name: "n >= k0 + 1".into(),
        required: (schedule.k0() + 1) as f64,
        actual: nf,
        satisfied: n >= schedule.k0() + 1,
    });
    if let Some(c_gap) = sigma_gap_constant {
        let required = 2.0 * c_gap / lambda_min_sigma_inf;
        let actual = nf.powf(1.0 - gamma);
        conditions.push(Condition {
            name: "n^(1-gamma) >= 2 C_gap/lambda_min(Sigma_inf)".into(),
            required,
            actual,
            satisfied: actual >= required,
        });
    }

    AssumptionReport::from_conditions(conditions)
}

/// Fluctuation-envelope sequence controlling the higher-order expansion
/// terms; three branches split at `gamma = 2/3`.
pub fn rate_envelope_phi(n: u64, schedule: &StepSchedule) -> f64 {
    let gamma = schedule.gamma();
    let c = schedule.c0().powf(1.5);
    let nf = n as f64;
    if (gamma - 2.0 / 3.0).abs() < 1e-12 {
        c * nf.ln() / nf.sqrt()
    } else if gamma < 2.0 / 3.0 {
        2.0 * c / ((1.0 - 1.5 * gamma) * nf.powf(1.5 * gamma - 0.5))
    } else {
        c / ((1.5 * gamma - 1.0) * nf.sqrt())
    }
}
