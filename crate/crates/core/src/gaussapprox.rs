//! Distance estimation between empirical laws and Gaussian references, exact
//! 1D Kolmogorov distances, and log-log rate fitting.
//!
//! The convex distance over all convex sets is not computable; the estimators
//! here measure the supremum over a finite half-space class (coordinate axes
//! plus seeded random directions) and over centred Euclidean balls. Both
//! lower-bound the convex distance, and the acceptance targets are rate
//! slopes, not absolute levels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_run_streaming, WeightScheme};
use crate::covariance;
use crate::engine;
use crate::linalg;
use crate::model::LsaInstance;
use crate::rngutil;
use crate::schedule::StepSchedule;
use crate::series::{fit_loglog, DistanceSeries, Metric, ReferenceLaw, SeriesPoint};
use crate::{LsaError, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact Kolmogorov distance between `N(0, sigma^2)` and `N(0, 1)`.
///
/// The CDF difference is extremal where the densities cross, at
/// `x*^2 = 2 sigma^2 ln(sigma) / (sigma^2 - 1)`.
pub fn kolmogorov_normal_vs_normal_1d(sigma: f64) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    if (sigma - 1.0).abs() < 1e-15 {
        return 0.0;
    }
    let x = (2.0 * sigma * sigma * sigma.ln() / (sigma * sigma - 1.0)).sqrt();
    (normal_cdf(x / sigma) - normal_cdf(x)).abs()
}

/// Standard deviation of the scaled average for the scalar unit problem
/// (`Abar = 1`, unit noise variance): the square root of the finite-horizon
/// covariance, exact because the average is Gaussian there.
pub fn lower_bound_sigma_n_1d(schedule: &StepSchedule, n: u64) -> f64 {
    let one = DMatrix::from_element(1, 1, 1.0);
    covariance::sigma_n(&one, &one, schedule, n)[(0, 0)].sqrt()
}

/// The coordinate axes followed by `total - d` seeded random unit vectors.
pub fn direction_set(d: usize, total: usize, seed: u64) -> Vec<DVector<f64>> {
    let total = total.max(d);
    let mut dirs: Vec<DVector<f64>> = (0..d)
        .map(|i| {
            let mut v = DVector::zeros(d);
            v[i] = 1.0;
            v
        })
        .collect();
    let mut rng = rngutil::stream(seed, 0xD1F5);
    while dirs.len() < total {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-8 {
            dirs.push(v / norm);
        }
    }
    dirs
}

/// Result of a half-space sweep: the max over directions plus the
/// per-direction table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalfspaceReport {
    pub distance: f64,
    /// Dvoretzky-Kiefer-Wolfowitz scale `1/sqrt(R)`.
    pub std_err: f64,
    pub per_direction: Vec<f64>,
}

fn validate_directions(d: usize, directions: &[DVector<f64>]) -> Result<()> {
    if directions.is_empty() {
        return Err(LsaError::InvalidParameter(
            "need at least one direction".into(),
        ));
    }
    for dir in directions {
        if dir.len() != d {
            return Err(LsaError::DimensionMismatch {
                expected: d,
                got: dir.len(),
            });
        }
        if (dir.norm() - 1.0).abs() > 1e-10 {
            return Err(LsaError::InvalidParameter(
                "directions must be unit vectors".into(),
            ));
        }
    }
    Ok(())
}

/// One-sample Kolmogorov-Smirnov statistic of sorted values against a CDF.
fn ks_sorted_vs_cdf<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let r = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        sup = sup
            .max(((i + 1) as f64 / r - f).abs())
            .max((i as f64 / r - f).abs());
    }
    sup
}

/// Two-sample Kolmogorov-Smirnov statistic of two sorted value arrays.
fn ks_sorted_two_sample(xs: &[f64], ys: &[f64]) -> f64 {
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < xs.len() && j < ys.len() {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        sup = sup.max((i as f64 / nx - j as f64 / ny).abs());
    }
    sup
}

fn sorted_projections(samples: &[DVector<f64>], dir: &DVector<f64>) -> Vec<f64> {
    let mut proj: Vec<f64> = samples.iter().map(|s| dir.dot(s)).collect();
    proj.sort_by(|a, b| a.partial_cmp(b).unwrap());
    proj
}

/// Sup over half-spaces (restricted to the given directions) of the gap
/// between the empirical law of `samples` and `N(0, reference_cov)`.
pub fn halfspace_distance(
    samples: &[DVector<f64>],
    reference_cov: &DMatrix<f64>,
    directions: &[DVector<f64>],
) -> Result<HalfspaceReport> {
    if samples.len() < 1000 {
        return Err(LsaError::InvalidParameter(
            "half-space estimator needs at least 1000 samples".into(),
        ));
    }
    let d = samples[0].len();
    validate_directions(d, directions)?;
    if linalg::sym_lambda_min(reference_cov) <= 0.0 {
        return Err(LsaError::NotPositiveDefinite(linalg::sym_lambda_min(
            reference_cov,
        )));
    }
    let per_direction: Vec<f64> = directions
        .par_iter()
        .map(|dir| {
            let sigma = dir.dot(&(reference_cov * dir)).sqrt();
            let proj = sorted_projections(samples, dir);
            ks_sorted_vs_cdf(&proj, |t| normal_cdf(t / sigma))
        })
        .collect();
    let distance = per_direction.iter().cloned().fold(0.0f64, f64::max);
    Ok(HalfspaceReport {
        distance,
        std_err: 1.0 / (samples.len() as f64).sqrt(),
        per_direction,
    })
}

/// Two-sample variant: sup over directions of the Kolmogorov-Smirnov
/// statistic between the two projected samples.
pub fn halfspace_distance_two_sample(
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    directions: &[DVector<f64>],
) -> Result<HalfspaceReport> {
    if xs.is_empty() || ys.is_empty() {
        return Err(LsaError::InvalidParameter("empty sample".into()));
    }
    let d = xs[0].len();
    validate_directions(d, directions)?;
    let per_direction: Vec<f64> = directions
        .par_iter()
        .map(|dir| {
            let px = sorted_projections(xs, dir);
            let py = sorted_projections(ys, dir);
            ks_sorted_two_sample(&px, &py)
        })
        .collect();
    let distance = per_direction.iter().cloned().fold(0.0f64, f64::max);
    let se = (1.0 / xs.len() as f64 + 1.0 / ys.len() as f64).sqrt();
    Ok(HalfspaceReport {
        distance,
        std_err: se,
        per_direction,
    })
}

/// Number of reference draws behind the Gaussian ball probabilities.
pub const BALL_REFERENCE_DRAWS: usize = 1_000_000;
const BALL_REFERENCE_SEED: u64 = 0xBA11;

/// Seeded Monte-Carlo reference for Gaussian ball probabilities under a
/// fixed covariance; reusable across calls.
pub struct BallReference {
    sorted_norms: Vec<f64>,
}

impl BallReference {
    pub fn new(reference_cov: &DMatrix<f64>, seed: u64) -> Result<Self> {
        let d = reference_cov.nrows();
        let chol = linalg::cholesky(reference_cov)?;
        let mut norms: Vec<f64> = (0..BALL_REFERENCE_DRAWS)
            .into_par_iter()
            .map(|i| {
                let mut rng = rngutil::stream(seed, i as u64);
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                (&chol * z).norm()
            })
            .collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            sorted_norms: norms,
        })
    }

    pub fn prob_within(&self, radius: f64) -> f64 {
        let idx = self.sorted_norms.partition_point(|&v| v <= radius);
        idx as f64 / self.sorted_norms.len() as f64
    }
}

/// Sup over the radius grid of the gap between the empirical norm law of
/// `samples` and the Gaussian reference ball probabilities.
pub fn ball_distance(
    samples: &[DVector<f64>],
    reference_cov: &DMatrix<f64>,
    radii_grid: &[f64],
) -> Result<f64> {
    let reference = BallReference::new(reference_cov, BALL_REFERENCE_SEED)?;
    ball_distance_with_reference(samples, &reference, radii_grid)
}

pub fn ball_distance_with_reference(
    samples: &[DVector<f64>],
    reference: &BallReference,
    radii_grid: &[f64],
) -> Result<f64> {
    if radii_grid.is_empty() {
        return Err(LsaError::InvalidParameter("empty radius grid".into()));
    }
    let mut norms: Vec<f64> = samples.iter().map(|s| s.norm()).collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_norm = *norms.last().unwrap();
    let max_radius = radii_grid.iter().cloned().fold(0.0f64, f64::max);
    if max_radius < max_norm {
        return Err(LsaError::InvalidParameter(format!(
            "radius grid must cover the sample norms (max norm {max_norm:.3}, max radius {max_radius:.3})"
        )));
    }
    let total = norms.len() as f64;
    let mut sup = 0.0f64;
    for &r in radii_grid {
        let emp = norms.partition_point(|&v| v <= r) as f64 / total;
        sup = sup.max((emp - reference.prob_within(r)).abs());
    }
    Ok(sup)
}

/// Which covariance the Gaussian reference uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceReference {
    /// Finite-horizon covariance of the averaged statistic.
    SigmaN,
    /// Asymptotic (CLT) covariance.
    SigmaInf,
}

/// Dominant theoretical exponent for the half-space distance of the scaled
/// average against the chosen Gaussian reference.
pub fn predicted_clt_exponent(gamma: f64, reference: CovarianceReference) -> f64 {
    match reference {
        CovarianceReference::SigmaN => -gamma / 2.0,
        CovarianceReference::SigmaInf => -(gamma / 2.0).min(1.0 - gamma),
    }
}

/// Dominant theoretical exponent for the bootstrap-validity distance.
pub fn predicted_validity_exponent(gamma: f64) -> f64 {
    -gamma / 2.0
}

/// DKW noise floor for an `R`-sample empirical CDF at 95% confidence.
pub fn dkw_floor(r: usize) -> f64 {
    ((2.0f64 / 0.05).ln() / (2.0 * r as f64)).sqrt()
}

/// Measure the half-space distance of `sqrt(n) (avg - theta*)` to the
/// Gaussian reference over a horizon grid.
///
/// Per grid point, `r_per_point` independent streaming trajectories are run
/// (initialised at `theta0`, zero when `None`) and swept against
/// `N(0, Sigma)` with the reference covariance chosen by `reference`.
/// Directions are the coordinate axes plus `k_directions - d` seeded random
/// unit vectors, shared across the grid.
#[allow(clippy::too_many_arguments)]
pub fn clt_rate_experiment(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n_grid: &[u64],
    r_per_point: usize,
    k_directions: usize,
    seed: u64,
    reference: CovarianceReference,
    theta0: Option<&DVector<f64>>,
) -> Result<DistanceSeries> {
    if r_per_point < 1000 {
        return Err(LsaError::InvalidParameter(
            "need at least 1000 replications per grid point".into(),
        ));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid.is_empty() {
        return Err(LsaError::InvalidParameter(
            "horizon grid must be nonempty and strictly increasing".into(),
        ));
    }
    let d = instance.dim();
    let dirs = direction_set(d, k_directions, seed);
    let start = theta0.cloned().unwrap_or_else(|| DVector::zeros(d));
    let star = instance.theta_star();

    let mut points = Vec::with_capacity(n_grid.len());
    for (gi, &n) in n_grid.iter().enumerate() {
        let sub_seed = rngutil::mix(seed, gi as u64);
        let samples: Vec<DVector<f64>> = (0..r_per_point)
            .into_par_iter()
            .map(|rep| {
                let run_seed = rngutil::mix(sub_seed, rep as u64);
                engine::lsa_run_streaming(instance, schedule, n, &start, run_seed)
                    .map(|(avg, _)| (avg - star) * (n as f64).sqrt())
            })
            .collect::<Result<_>>()?;
        let sigma = match reference {
            CovarianceReference::SigmaN => {
                covariance::sigma_n(instance.abar(), instance.sigma_eps(), schedule, n)
            }
            CovarianceReference::SigmaInf => {
                covariance::sigma_inf(instance.abar(), instance.sigma_eps())?
            }
        };
        let report = halfspace_distance(&samples, &sigma, &dirs)?;
        points.push(SeriesPoint {
            n,
            distance: report.distance,
            std_err: report.std_err,
        });
    }

    let floor = dkw_floor(r_per_point);
    let min_distance = points
        .iter()
        .map(|p| p.distance)
        .fold(f64::INFINITY, f64::min);
    if min_distance < 3.0 * floor {
        eprintln!(
            "warning: smallest distance {min_distance:.4} is within 3x the DKW noise floor {floor:.4}; increase replications"
        );
    }

    Ok(DistanceSeries::new(
        Metric::HalfspaceSup,
        match reference {
            CovarianceReference::SigmaN => ReferenceLaw::SigmaN,
            CovarianceReference::SigmaInf => ReferenceLaw::SigmaInf,
        },
        points,
    ))
}

/// Median and 90th-percentile series of the per-trajectory half-space
/// distance between the bootstrap-world law and the real-world law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValiditySeries {
    pub median: DistanceSeries,
    pub p90: DistanceSeries,
}

const REAL_SALT: u64 = 0x4EA1;
const DATA_SALT: u64 = 0xDA7A;
const WEIGHT_SALT: u64 = 0xB007;

/// For each horizon: estimate the law of `sqrt(n)(avg - theta*)` from
/// `r_real` fresh runs, then for each of `r_outer` data trajectories estimate
/// the conditional law of `sqrt(n)(avg_boot - avg)` from `m_replicates`
/// perturbed replicates, and report the per-trajectory two-sample half-space
/// distance (median and 90th percentile over trajectories).
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_validity_experiment(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n_grid: &[u64],
    m_replicates: usize,
    r_outer: usize,
    r_real: usize,
    k_directions: usize,
    seed: u64,
    scheme: WeightScheme,
    theta0: Option<&DVector<f64>>,
) -> Result<ValiditySeries> {
    if m_replicates < 1000 || r_real < 1000 {
        return Err(LsaError::InvalidParameter(
            "need at least 1000 bootstrap replicates and 1000 real-law samples".into(),
        ));
    }
    if r_outer < 2 {
        return Err(LsaError::InvalidParameter(
            "need at least two outer trajectories".into(),
        ));
    }
    let d = instance.dim();
    let dirs = direction_set(d, k_directions, seed);
    let start = theta0.cloned().unwrap_or_else(|| DVector::zeros(d));
    let star = instance.theta_star();

    let mut median_points = Vec::with_capacity(n_grid.len());
    let mut p90_points = Vec::with_capacity(n_grid.len());
    for (gi, &n) in n_grid.iter().enumerate() {
        let sub_seed = rngutil::mix(seed, gi as u64);
        let sqrt_n = (n as f64).sqrt();

        let real_seed = rngutil::mix(sub_seed, REAL_SALT);
        let real: Vec<DVector<f64>> = (0..r_real)
            .into_par_iter()
            .map(|rep| {
                let run_seed = rngutil::mix(real_seed, rep as u64);
                engine::lsa_run_streaming(instance, schedule, n, &start, run_seed)
                    .map(|(avg, _)| (avg - star) * sqrt_n)
            })
            .collect::<Result<_>>()?;

        let mut distances: Vec<f64> = (0..r_outer)
            .into_par_iter()
            .map(|t| {
                let data_seed = rngutil::mix(rngutil::mix(sub_seed, DATA_SALT), t as u64);
                let weight_seed = rngutil::mix(rngutil::mix(sub_seed, WEIGHT_SALT), t as u64);
                let ensemble = bootstrap_run_streaming(
                    instance,
                    schedule,
                    n,
                    &start,
                    m_replicates,
                    scheme,
                    data_seed,
                    weight_seed,
                )?;
                let boot: Vec<DVector<f64>> = ensemble
                    .averages
                    .iter()
                    .map(|avg| (avg - &ensemble.base_average) * sqrt_n)
                    .collect();
                Ok(halfspace_distance_two_sample(&boot, &real, &dirs)?.distance)
            })
            .collect::<Result<_>>()?;
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = distances[(r_outer - 1) / 2];
        let p90 = distances[(((0.9 * r_outer as f64).ceil() as usize).clamp(1, r_outer)) - 1];
        let se = (1.0 / m_replicates as f64 + 1.0 / r_real as f64).sqrt();
        median_points.push(SeriesPoint {
            n,
            distance: median,
            std_err: se,
        });
        p90_points.push(SeriesPoint {
            n,
            distance: p90,
            std_err: se,
        });
    }

    Ok(ValiditySeries {
        median: DistanceSeries::new(Metric::HalfspaceSup, ReferenceLaw::Empirical, median_points),
        p90: DistanceSeries::new(Metric::HalfspaceSup, ReferenceLaw::Empirical, p90_points),
    })
}

/// Fitted log-log slope with confidence information.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
}

/// OLS of `ln distance` on `ln n`. Exact duplicate points are removed first;
/// at least three distinct points with positive distances are required.
pub fn rate_fit(series: &DistanceSeries) -> Result<RateFit> {
    let mut seen: Vec<(u64, f64)> = Vec::new();
    for p in &series.points {
        if p.distance <= 0.0 {
            return Err(LsaError::InvalidParameter(format!(
                "nonpositive distance {} at n = {}",
                p.distance, p.n
            )));
        }
        if !seen.iter().any(|&(n, d)| n == p.n && d == p.distance) {
            seen.push((p.n, p.distance));
        }
    }
    if seen.len() < 3 {
        return Err(LsaError::InvalidParameter(
            "need at least three distinct points for a rate fit".into(),
        ));
    }
    let xs: Vec<f64> = seen.iter().map(|&(n, _)| n as f64).collect();
    let ys: Vec<f64> = seen.iter().map(|&(_, d)| d).collect();
    let (slope, intercept, r_squared, slope_stderr) = fit_loglog(&xs, &ys)?;
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
    })
}
