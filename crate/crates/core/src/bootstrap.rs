//! Online multiplier bootstrap: weight schemes, the M-replicate perturbed
//! recursion sharing one observation stream, confidence sets and coverage
//! experiments.
//!
//! Replicates update step-synchronously: a streaming pass draws each
//! observation once and applies it to the base state and all M perturbed
//! states, so memory is `O(M d)` regardless of the horizon. Weight streams
//! are derived per replicate from `(seed, replicate_index)` and therefore do
//! not depend on how replicates are partitioned across threads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Trajectory;
use crate::linalg;
use crate::model::LsaInstance;
use crate::rngutil;
use crate::schedule::StepSchedule;
use crate::{LsaError, Result, DIVERGENCE_GUARD};

/// Multiplier-weight law; all non-degenerate kinds have mean one and
/// variance one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `{0, 2}` with equal probability; `E|w-1|^3 = 1` exactly.
    TwoPoint,
    /// Standard exponential.
    Exponential,
    /// Poisson with unit rate (mean one, variance one).
    PoissonShifted,
    /// `w = 1` identically. Collapses the perturbed recursion onto the base
    /// one; violates the variance-one contract and exists only for
    /// degenerate-sanity diagnostics.
    Constant,
}

impl WeightScheme {
    pub fn mean(&self) -> f64 {
        1.0
    }

    pub fn variance(&self) -> f64 {
        match self {
            WeightScheme::Constant => 0.0,
            _ => 1.0,
        }
    }

    /// Third absolute central moment `E|w - 1|^3`.
    pub fn m3(&self) -> f64 {
        match self {
            WeightScheme::TwoPoint => 1.0,
            // int |x-1|^3 e^{-x} dx = 12/e - 2
            WeightScheme::Exponential => 12.0 * (-1.0f64).exp() - 2.0,
            WeightScheme::PoissonShifted => {
                // e^{-1} (1 + sum_{k>=2} (k-1)^3 / k!), summed to convergence
                let mut factorial = 1.0f64;
                let mut total = 1.0f64; // k = 0 term: |0-1|^3 / 0!
                for k in 2..64u64 {
                    factorial *= k as f64; // k! built incrementally from 1! = 1
                    let term = ((k - 1) as f64).powi(3) / factorial;
                    total += term;
                    if term < 1e-18 {
                        break;
                    }
                }
                total * (-1.0f64).exp()
            }
            WeightScheme::Constant => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            WeightScheme::TwoPoint => {
                if rng.gen::<bool>() {
                    2.0
                } else {
                    0.0
                }
            }
            WeightScheme::Exponential => {
                let u: f64 = rng.gen(); // in [0, 1)
                -(1.0 - u).ln()
            }
            WeightScheme::PoissonShifted => {
                // Knuth's product method, fine at unit rate.
                let limit = (-1.0f64).exp();
                let mut k = 0u32;
                let mut p = 1.0f64;
                loop {
                    p *= rng.gen::<f64>();
                    if p <= limit {
                        break;
                    }
                    k += 1;
                }
                k as f64
            }
            WeightScheme::Constant => 1.0,
        }
    }
}

/// Draw one multiplier weight.
pub fn sample_weight(scheme: WeightScheme, rng: &mut ChaCha12Rng) -> f64 {
    scheme.sample(rng)
}

/// M perturbed averaged estimates sharing one observation sequence.
#[derive(Debug, Clone)]
pub struct BootstrapEnsemble {
    pub m: usize,
    /// Averaged perturbed estimates, one per replicate.
    pub averages: Vec<DVector<f64>>,
    pub base_average: DVector<f64>,
    pub n: u64,
    pub scheme: WeightScheme,
    pub seed: u64,
}

fn perturbed_pass(
    schedule: &StepSchedule,
    n: u64,
    theta0: &DVector<f64>,
    observations: &[(DMatrix<f64>, DVector<f64>)],
    scheme: WeightScheme,
    mut rng: ChaCha12Rng,
) -> Result<DVector<f64>> {
    let d = theta0.len();
    let mut theta = theta0.clone();
    let mut sum = theta.clone();
    let mut update = DVector::zeros(d);
    for k in 1..n {
        let (a, b) = &observations[(k - 1) as usize];
        let w = scheme.sample(&mut rng);
        update.gemv(1.0, a, &theta, 0.0);
        update -= b;
        theta.axpy(-(schedule.step_size(k) * w), &update, 1.0);
        let norm = theta.norm();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(LsaError::Divergence {
                step: k as usize,
                norm,
            });
        }
        sum += &theta;
    }
    Ok(sum / n as f64)
}

/// Run M perturbed replicates over the observations recorded in `trajectory`,
/// starting every replicate from the trajectory's own initial point.
pub fn bootstrap_run(
    trajectory: &Trajectory,
    m: usize,
    scheme: WeightScheme,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    if m < 1 {
        return Err(LsaError::InvalidParameter(
            "need at least one replicate".into(),
        ));
    }
    let averages: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|l| {
            perturbed_pass(
                &trajectory.schedule,
                trajectory.n,
                &trajectory.theta0,
                &trajectory.observations,
                scheme,
                rngutil::stream(seed, l as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(BootstrapEnsemble {
        m,
        averages,
        base_average: trajectory.average.clone(),
        n: trajectory.n,
        scheme,
        seed,
    })
}

/// One-pass variant for experiments: draws observations from the instance
/// and updates the base state plus all M perturbed states step-synchronously
/// without storing the stream.
pub fn bootstrap_run_streaming(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n: u64,
    theta0: &DVector<f64>,
    m: usize,
    scheme: WeightScheme,
    data_seed: u64,
    weight_seed: u64,
) -> Result<BootstrapEnsemble> {
    if m < 1 {
        return Err(LsaError::InvalidParameter(
            "need at least one replicate".into(),
        ));
    }
    let d = instance.dim();
    let mut sampler = instance.sampler_with_seed(data_seed);
    let mut base = theta0.clone();
    let mut base_sum = base.clone();
    let mut states = vec![theta0.clone(); m];
    let mut sums = vec![theta0.clone(); m];
    let mut rngs: Vec<ChaCha12Rng> = (0..m)
        .map(|l| rngutil::stream(weight_seed, l as u64))
        .collect();
    let mut update = DVector::zeros(d);
    for k in 1..n {
        let alpha = schedule.step_size(k);
        let draw = sampler.draw();
        for (l, state) in states.iter_mut().enumerate() {
            let w = scheme.sample(&mut rngs[l]);
            draw.apply(state, &mut update);
            state.axpy(-(alpha * w), &update, 1.0);
            let norm = state.norm();
            if !norm.is_finite() || norm > DIVERGENCE_GUARD {
                return Err(LsaError::Divergence {
                    step: k as usize,
                    norm,
                });
            }
            sums[l] += &*state;
        }
        draw.apply(&base, &mut update);
        base.axpy(-alpha, &update, 1.0);
        let norm = base.norm();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(LsaError::Divergence {
                step: k as usize,
                norm,
            });
        }
        base_sum += &base;
    }
    let nf = n as f64;
    Ok(BootstrapEnsemble {
        m,
        averages: sums.into_iter().map(|s| s / nf).collect(),
        base_average: base_sum / nf,
        n,
        scheme,
        seed: weight_seed,
    })
}

/// Order statistic at index `ceil(p * M)` (1-based, clamped).
fn order_stat(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let idx = ((p * m as f64).ceil() as usize).clamp(1, m);
    sorted[idx - 1]
}

/// Confidence sets extracted from an ensemble, all centred at the base
/// average: per-coordinate percentile intervals, a sup-norm box radius
/// and an ellipsoidal radius under the ensemble's sample covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub level: f64,
    /// Per-coordinate `[lo, hi]`.
    pub intervals: Vec<(f64, f64)>,
    pub sup_radius: f64,
    pub ellipsoid_radius: f64,
    /// Row-major sample covariance of the deviations (ridge included).
    pub ellipsoid_shape: Vec<Vec<f64>>,
    /// All deviations are numerically zero (e.g. constant weights); radii
    /// are reported as zero.
    pub degenerate: bool,
    /// Target inside every per-coordinate interval, when a target was given.
    pub contains_target: Option<bool>,
    /// Per-shape membership, when a target was given.
    pub target_hits: Option<ShapeHits>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeHits {
    pub per_coordinate: Vec<bool>,
    pub rectangle: bool,
    pub sup_norm: bool,
    pub ellipsoid: bool,
}

const ELLIPSOID_RIDGE: f64 = 1e-10;

/// Extract confidence sets at the given level (quantile rule: order statistic
/// at `ceil(level * M)`).
pub fn confidence_sets(
    ensemble: &BootstrapEnsemble,
    level: f64,
    theta_star: Option<&DVector<f64>>,
) -> Result<ConfidenceReport> {
    if !(0.0 < level && level < 1.0) {
        return Err(LsaError::InvalidParameter(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if ensemble.m < 50 {
        return Err(LsaError::InvalidParameter(
            "need at least 50 replicates for stable quantiles".into(),
        ));
    }
    let d = ensemble.base_average.len();
    let m = ensemble.m;
    let center = &ensemble.base_average;
    let deviations: Vec<DVector<f64>> = ensemble.averages.iter().map(|a| a - center).collect();

    let scale = 1.0 + center.norm();
    let degenerate = deviations.iter().all(|v| v.norm() <= 1e-13 * scale);

    // per-coordinate percentile intervals
    let mut intervals = Vec::with_capacity(d);
    for i in 0..d {
        let mut coord: Vec<f64> = deviations.iter().map(|v| v[i]).collect();
        coord.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = order_stat(&coord, (1.0 - level) / 2.0);
        let hi = order_stat(&coord, (1.0 + level) / 2.0);
        intervals.push((center[i] + lo, center[i] + hi));
    }

    // sup-norm radius
    let mut maxabs: Vec<f64> = deviations.iter().map(|v| v.amax()).collect();
    maxabs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sup_radius = order_stat(&maxabs, level);

    // ellipsoidal radius under the sample covariance
    let (ellipsoid_radius, shape) = if degenerate {
        (0.0, DMatrix::from_diagonal_element(d, d, ELLIPSOID_RIDGE))
    } else {
        let mut mean = DVector::<f64>::zeros(d);
        for v in &deviations {
            mean += v;
        }
        mean /= m as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for v in &deviations {
            let c = v - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (m - 1) as f64;
        cov = 0.5 * (&cov + cov.transpose());
        let lam_min = linalg::sym_lambda_min(&cov);
        if lam_min < 1e-14 {
            return Err(LsaError::DegenerateEnsemble(lam_min));
        }
        let ridged = &cov + DMatrix::from_diagonal_element(d, d, ELLIPSOID_RIDGE);
        let chol = linalg::cholesky(&ridged)?;
        let mahal = |v: &DVector<f64>| -> f64 {
            // solve L y = v, then |y| is the Mahalanobis norm
            let mut y = v.clone();
            chol.solve_lower_triangular_mut(&mut y);
            y.norm()
        };
        let mut dists: Vec<f64> = deviations.iter().map(mahal).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (order_stat(&dists, level), ridged)
    };

    let shape_rows: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| shape[(i, j)]).collect())
        .collect();

    let (contains_target, target_hits) = match theta_star {
        None => (None, None),
        Some(star) => {
            let per_coordinate: Vec<bool> = (0..d)
                .map(|i| intervals[i].0 <= star[i] && star[i] <= intervals[i].1)
                .collect();
            let rectangle = per_coordinate.iter().all(|&h| h);
            let diff = star - center;
            let sup_hit = diff.amax() <= sup_radius;
            let ell_hit = if degenerate {
                diff.norm() <= 1e-13 * scale
            } else {
                let chol = linalg::cholesky(&shape)?;
                let mut y = diff.clone();
                chol.solve_lower_triangular_mut(&mut y);
                y.norm() <= ellipsoid_radius
            };
            (
                Some(rectangle),
                Some(ShapeHits {
                    per_coordinate,
                    rectangle,
                    sup_norm: sup_hit,
                    ellipsoid: ell_hit,
                }),
            )
        }
    };

    Ok(ConfidenceReport {
        level,
        intervals,
        sup_radius,
        ellipsoid_radius,
        ellipsoid_shape: shape_rows,
        degenerate,
        contains_target,
        target_hits,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub coverage: f64,
    /// Binomial standard error `sqrt(p(1-p)/R)`.
    pub std_err: f64,
}

/// Empirical coverage of each set shape over independent outer replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub level: f64,
    pub replications: usize,
    pub per_coordinate: Vec<CoverageEntry>,
    /// All coordinates simultaneously inside their intervals.
    pub rectangle: CoverageEntry,
    pub sup_norm: CoverageEntry,
    pub ellipsoid: CoverageEntry,
    pub degenerate_runs: usize,
    pub divergent_runs: usize,
}

fn entry(hits: usize, total: usize) -> CoverageEntry {
    let p = hits as f64 / total as f64;
    CoverageEntry {
        coverage: p,
        std_err: (p * (1.0 - p) / total as f64).sqrt(),
    }
}

/// For each of `r` outer replications: draw a fresh trajectory, run the
/// bootstrap on it, and test whether the target lies in each set.
#[allow(clippy::too_many_arguments)]
pub fn coverage_experiment(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n: u64,
    m: usize,
    r: usize,
    level: f64,
    scheme: WeightScheme,
    seed: u64,
) -> Result<CoverageSummary> {
    if r < 100 {
        return Err(LsaError::InvalidParameter(
            "need at least 100 outer replications".into(),
        ));
    }
    let d = instance.dim();
    let theta0 = DVector::zeros(d);
    let star = instance.theta_star().clone();

    let outcomes: Vec<Result<Option<(Vec<bool>, bool, bool, bool, bool)>>> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let data_seed = rngutil::mix(seed, 2 * rep as u64);
            let weight_seed = rngutil::mix(seed, 2 * rep as u64 + 1);
            let ensemble = match bootstrap_run_streaming(
                instance,
                schedule,
                n,
                &theta0,
                m,
                scheme,
                data_seed,
                weight_seed,
            ) {
                Ok(e) => e,
                Err(LsaError::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let report = confidence_sets(&ensemble, level, Some(&star))?;
            let hits = report.target_hits.expect("target supplied");
            Ok(Some((
                hits.per_coordinate,
                hits.rectangle,
                hits.sup_norm,
                hits.ellipsoid,
                report.degenerate,
            )))
        })
        .collect();

    let mut per_coord_hits = vec![0usize; d];
    let mut rect_hits = 0usize;
    let mut sup_hits = 0usize;
    let mut ell_hits = 0usize;
    let mut degenerate_runs = 0usize;
    let mut divergent_runs = 0usize;
    let mut effective = 0usize;
    for outcome in outcomes {
        match outcome? {
            None => divergent_runs += 1,
            Some((coords, rect, sup, ell, degenerate)) => {
                effective += 1;
                for (i, hit) in coords.iter().enumerate() {
                    if *hit {
                        per_coord_hits[i] += 1;
                    }
                }
                if rect {
                    rect_hits += 1;
                }
                if sup {
                    sup_hits += 1;
                }
                if ell {
                    ell_hits += 1;
                }
                if degenerate {
                    degenerate_runs += 1;
                }
            }
        }
    }
    if effective == 0 {
        return Err(LsaError::InvalidParameter(
            "every replication diverged".into(),
        ));
    }
    Ok(CoverageSummary {
        level,
        replications: effective,
        per_coordinate: per_coord_hits
            .into_iter()
            .map(|h| entry(h, effective))
            .collect(),
        rectangle: entry(rect_hits, effective),
        sup_norm: entry(sup_hits, effective),
        ellipsoid: entry(ell_hits, effective),
        degenerate_runs,
        divergent_runs,
    })
}
