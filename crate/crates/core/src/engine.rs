//! The averaged LSA recursion, recorded trajectories, and exact error
//! decompositions.
//!
//! Averaging convention: the average runs over iterates `theta_0 ..
//! theta_{n-1}` divided by `n`. The same convention is used by the bootstrap
//! module; changing it would silently break every identity below.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::linalg;
use crate::model::LsaInstance;
use crate::rngutil;
use crate::schedule::{self, StepSchedule};
use crate::series;
use crate::{LsaError, Result, DIVERGENCE_GUARD};

/// A recorded run: observations, iterates, running average and noises.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub schedule: StepSchedule,
    pub n: u64,
    pub seed: u64,
    pub theta0: DVector<f64>,
    pub abar: DMatrix<f64>,
    /// Target vector, when the generating instance knows it.
    pub theta_star: Option<DVector<f64>>,
    /// Observation pairs `(A_k, b_k)` for `k = 1..=n-1`.
    pub observations: Vec<(DMatrix<f64>, DVector<f64>)>,
    /// Iterates `theta_0 ..= theta_{n-1}`.
    pub iterates: Vec<DVector<f64>>,
    /// `n^{-1} sum_{k=0}^{n-1} theta_k`.
    pub average: DVector<f64>,
    /// Noises at the solution `eps_k`, `k = 1..=n-1`; present when the
    /// target is known.
    pub noises: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.theta0.len()
    }
}

fn guard(theta: &DVector<f64>, step: usize) -> Result<()> {
    let norm = theta.norm();
    if !norm.is_finite() || norm > DIVERGENCE_GUARD {
        return Err(LsaError::Divergence { step, norm });
    }
    Ok(())
}

/// Run the recursion `theta_k = theta_{k-1} - alpha_k (A_k theta_{k-1} - b_k)`
/// for `k = 1..=n-1`, recording everything.
pub fn lsa_run(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n: u64,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    if n < 2 {
        return Err(LsaError::InvalidParameter(
            "horizon must be at least 2".into(),
        ));
    }
    let d = instance.dim();
    if theta0.len() != d {
        return Err(LsaError::DimensionMismatch {
            expected: d,
            got: theta0.len(),
        });
    }
    let mut sampler = instance.sampler_with_seed(seed);
    let count = (n - 1) as usize;
    let mut observations = Vec::with_capacity(count);
    let mut noises = Vec::with_capacity(count);
    let mut iterates = Vec::with_capacity(n as usize);
    let mut theta = theta0.clone();
    let mut sum = theta.clone();
    let mut update = DVector::zeros(d);
    iterates.push(theta.clone());
    for k in 1..n {
        let draw = sampler.draw();
        observations.push(draw.observation(d));
        noises.push(draw.noise());
        draw.apply(&theta, &mut update);
        theta.axpy(-schedule.step_size(k), &update, 1.0);
        guard(&theta, k as usize)?;
        iterates.push(theta.clone());
        sum += &theta;
    }
    Ok(Trajectory {
        schedule: *schedule,
        n,
        seed,
        theta0: theta0.clone(),
        abar: instance.abar().clone(),
        theta_star: Some(instance.theta_star().clone()),
        observations,
        iterates,
        average: sum / n as f64,
        noises: Some(noises),
    })
}

/// Streaming run that retains only the running average and the last iterate.
/// Decomposition operations are unavailable on the result.
pub fn lsa_run_streaming(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n: u64,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if n < 2 {
        return Err(LsaError::InvalidParameter(
            "horizon must be at least 2".into(),
        ));
    }
    let d = instance.dim();
    let mut sampler = instance.sampler_with_seed(seed);
    let mut theta = theta0.clone();
    let mut sum = theta.clone();
    let mut update = DVector::zeros(d);
    for k in 1..n {
        let draw = sampler.draw();
        draw.apply(&theta, &mut update);
        theta.axpy(-schedule.step_size(k), &update, 1.0);
        guard(&theta, k as usize)?;
        sum += &theta;
    }
    Ok((sum / n as f64, theta))
}

/// Product of observed update factors `prod_{l=m..=k} (I - alpha_l A_l)` with
/// later factors applied on the left; identity when `m > k`.
pub fn transition_product(trajectory: &Trajectory, m: u64, k: u64) -> Result<DMatrix<f64>> {
    let d = trajectory.dim();
    if m < 1 || k > trajectory.n - 1 {
        return Err(LsaError::InvalidParameter(format!(
            "product indices must satisfy 1 <= m, k <= n-1, got m={m}, k={k}"
        )));
    }
    let mut acc = DMatrix::identity(d, d);
    if m > k {
        return Ok(acc);
    }
    let eye = DMatrix::identity(d, d);
    for l in m..=k {
        let (a, _) = &trajectory.observations[(l - 1) as usize];
        let factor = &eye - trajectory.schedule.step_size(l) * a;
        acc = factor * acc;
    }
    Ok(acc)
}

/// Exact split of the iterate error into the initial-condition term, the
/// perturbation-expansion levels and the remainder.
///
/// For all `k`:
/// `theta_k - theta* = transient_k + sum_{l=0..=L} levels[l][k] + remainder[k]`.
#[derive(Debug, Clone)]
pub struct ErrorDecomposition {
    /// `Gamma_{1:k} (theta_0 - theta*)` for `k = 0..=n-1`.
    pub transient: Vec<DVector<f64>>,
    /// Expansion levels `0..=depth`, each indexed by `k = 0..=n-1`. Level 0
    /// is the leading linear statistic; its per-step scale is
    /// `alpha_k^{(l+1)/2}` at level `l`.
    pub levels: Vec<Vec<DVector<f64>>>,
    /// Remainder at the chosen depth, indexed by `k = 0..=n-1`.
    pub remainder: Vec<DVector<f64>>,
    pub depth: usize,
}

impl ErrorDecomposition {
    /// Largest relative reconstruction error over all iterates.
    pub fn reconstruction_error(&self, trajectory: &Trajectory) -> Result<f64> {
        let star = trajectory
            .theta_star
            .as_ref()
            .ok_or(LsaError::MissingTarget)?;
        let mut worst = 0.0_f64;
        for k in 0..trajectory.n as usize {
            let mut rebuilt = self.transient[k].clone();
            for level in &self.levels {
                rebuilt += &level[k];
            }
            rebuilt += &self.remainder[k];
            let truth = &trajectory.iterates[k] - star;
            let rel = (&rebuilt - &truth).norm() / (1.0 + truth.norm());
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// Compute the perturbation expansion of depth `L` (0, 1 or 2) along a
/// recorded trajectory.
pub fn error_decompose(trajectory: &Trajectory, depth: usize) -> Result<ErrorDecomposition> {
    if depth > 2 {
        return Err(LsaError::InvalidParameter(
            "expansion depth must be 0, 1 or 2".into(),
        ));
    }
    let star = trajectory
        .theta_star
        .as_ref()
        .ok_or(LsaError::MissingTarget)?;
    let noises = trajectory.noises.as_ref().ok_or(LsaError::MissingNoises)?;
    let d = trajectory.dim();
    let n = trajectory.n as usize;
    let abar = &trajectory.abar;
    let eye = DMatrix::<f64>::identity(d, d);

    let mut transient = Vec::with_capacity(n);
    transient.push(&trajectory.theta0 - star);
    let mut levels: Vec<Vec<DVector<f64>>> = (0..=depth)
        .map(|_| {
            let mut v = Vec::with_capacity(n);
            v.push(DVector::zeros(d));
            v
        })
        .collect();
    let mut remainder = Vec::with_capacity(n);
    remainder.push(DVector::<f64>::zeros(d));

    for k in 1..n {
        let alpha = trajectory.schedule.step_size(k as u64);
        let (a_k, _) = &trajectory.observations[k - 1];
        let eps_k = &noises[k - 1];
        let obs_factor = &eye - alpha * a_k;
        let mean_factor = &eye - alpha * abar;
        let centered = a_k - abar;

        transient.push(&obs_factor * &transient[k - 1]);

        // level 0: mean-field recursion driven by the noise
        let mut prev_level = {
            let v = &mean_factor * &levels[0][k - 1] - alpha * eps_k;
            levels[0].push(v);
            levels[0][k - 1].clone()
        };
        // levels l >= 1: driven by the centered observation times level l-1
        for l in 1..=depth {
            let v = &mean_factor * &levels[l][k - 1] - alpha * (&centered * &prev_level);
            prev_level = levels[l][k - 1].clone();
            levels[l].push(v);
        }
        // remainder at the chosen depth, driven by the deepest level
        let v = &obs_factor * &remainder[k - 1] - alpha * (&centered * &levels[depth][k - 1]);
        remainder.push(v);
    }

    Ok(ErrorDecomposition {
        transient,
        levels,
        remainder,
        depth,
    })
}

/// Relative residual of the summed linear statistic against the weighted
/// noise sum: `|sum_k level0_k + sum_l Q_l eps_l| / (1 + |sum_k level0_k|)`.
pub fn linear_statistic_identity(
    decomposition: &ErrorDecomposition,
    weights: &[DMatrix<f64>],
    noises: &[DVector<f64>],
) -> Result<f64> {
    if weights.len() != noises.len() {
        return Err(LsaError::DimensionMismatch {
            expected: noises.len(),
            got: weights.len(),
        });
    }
    if decomposition.levels[0].len() != noises.len() + 1 {
        return Err(LsaError::DimensionMismatch {
            expected: noises.len() + 1,
            got: decomposition.levels[0].len(),
        });
    }
    let d = decomposition.transient[0].len();
    let mut linear_sum = DVector::<f64>::zeros(d);
    for v in &decomposition.levels[0] {
        linear_sum += v;
    }
    let mut weighted = DVector::<f64>::zeros(d);
    let mut buf = DVector::<f64>::zeros(d);
    for (q, eps) in weights.iter().zip(noises) {
        buf.gemv(1.0, q, eps, 0.0);
        weighted += &buf;
    }
    Ok((&linear_sum + &weighted).norm() / (1.0 + linear_sum.norm()))
}

/// Monte-Carlo estimate of the `p`-th moment of the observed product norm
/// against its exponential-stability envelope.
#[derive(Debug, Clone)]
pub struct StabilityDiagnostic {
    /// `E^{1/p} |Gamma_{m:k}|^p` over fresh observation streams.
    pub empirical: f64,
    /// `sqrt(kappa_Q) e prod (1 - a alpha_l / 2)`.
    pub bound: f64,
    pub ratio: f64,
}

pub fn stability_diagnostic(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    m: u64,
    k: u64,
    p: f64,
    replications: usize,
    seed: u64,
) -> Result<StabilityDiagnostic> {
    if replications < 100 {
        return Err(LsaError::InvalidParameter(
            "stability diagnostic needs at least 100 replications".into(),
        ));
    }
    if m < 1 || m > k {
        return Err(LsaError::InvalidParameter(format!(
            "need 1 <= m <= k, got m={m}, k={k}"
        )));
    }
    let d = instance.dim();
    let consts = schedule::stability_constants(instance.abar(), None, instance.bound_a())?;
    let moments: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut sampler = instance.sampler_from_rng(rngutil::stream(seed, r as u64));
            let eye = DMatrix::<f64>::identity(d, d);
            let mut acc = DMatrix::<f64>::identity(d, d);
            for l in m..=k {
                let draw = sampler.draw();
                let (a, _) = draw.observation(d);
                acc = (&eye - schedule.step_size(l) * a) * acc;
            }
            linalg::spectral_norm(&acc).powf(p)
        })
        .collect();
    let empirical = (moments.iter().sum::<f64>() / replications as f64).powf(1.0 / p);
    let mut bound = consts.kappa_q.sqrt() * std::f64::consts::E;
    for l in m..=k {
        bound *= 1.0 - 0.5 * consts.a * schedule.step_size(l);
    }
    Ok(StabilityDiagnostic {
        empirical,
        bound,
        ratio: empirical / bound,
    })
}

/// Root-mean-square profile of the expansion levels over replications:
/// for each level `l` in `{0, 1, 2}` and step `k`, the RMS of
/// `|level_l at step k|` across fresh runs, together with the step sizes.
///
/// Regressing `ln rms` on `ln alpha_k` over the tail recovers the
/// separation-of-scales exponents `(l + 1) / 2`.
pub struct MomentProfile {
    /// `alpha_k` for `k = 1..=n-1`.
    pub alphas: Vec<f64>,
    /// One RMS sequence per level, each aligned with `alphas`.
    pub rms: [Vec<f64>; 3],
}

impl MomentProfile {
    /// Log-log slope of level `l` over steps with `alpha_k` in the tail
    /// window `k in [n/4, n-1]`.
    pub fn tail_slope(&self, level: usize) -> Result<f64> {
        let n = self.alphas.len() + 1;
        let from = n / 4;
        let xs: Vec<f64> = (from..n).map(|k| self.alphas[k - 1]).collect();
        let ys: Vec<f64> = (from..n).map(|k| self.rms[level][k - 1]).collect();
        let (slope, _, _, _) = series::fit_loglog(&xs, &ys)?;
        Ok(slope)
    }
}

pub fn expansion_moment_profile(
    instance: &LsaInstance,
    schedule: &StepSchedule,
    n: u64,
    replications: usize,
    seed: u64,
) -> Result<MomentProfile> {
    let d = instance.dim();
    let count = (n - 1) as usize;
    let abar = instance.abar().clone();
    let eye = DMatrix::<f64>::identity(d, d);

    let acc = (0..replications)
        .into_par_iter()
        .fold(
            || vec![[0.0f64; 3]; count],
            |mut acc, r| {
                let mut sampler = instance.sampler_from_rng(rngutil::stream(seed, r as u64));
                let mut j = [DVector::<f64>::zeros(d), DVector::zeros(d), DVector::zeros(d)];
                for k in 1..n {
                    let alpha = schedule.step_size(k);
                    let draw = sampler.draw();
                    let (a_k, _) = draw.observation(d);
                    let eps = draw.noise();
                    let mean_factor = &eye - alpha * &abar;
                    let centered = &a_k - &abar;
                    let j2 = &mean_factor * &j[2] - alpha * (&centered * &j[1]);
                    let j1 = &mean_factor * &j[1] - alpha * (&centered * &j[0]);
                    let j0 = &mean_factor * &j[0] - alpha * eps;
                    j = [j0, j1, j2];
                    let cell = &mut acc[(k - 1) as usize];
                    for l in 0..3 {
                        cell[l] += j[l].norm_squared();
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![[0.0f64; 3]; count],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    for l in 0..3 {
                        x[l] += y[l];
                    }
                }
                a
            },
        );

    let alphas: Vec<f64> = (1..n).map(|k| schedule.step_size(k)).collect();
    let mut rms: [Vec<f64>; 3] = [
        Vec::with_capacity(count),
        Vec::with_capacity(count),
        Vec::with_capacity(count),
    ];
    for cell in &acc {
        for l in 0..3 {
            rms[l].push((cell[l] / replications as f64).sqrt());
        }
    }
    Ok(MomentProfile { alphas, rms })
}

// --- serialization ---------------------------------------------------------

const MAGIC: &[u8; 8] = b"LSATRAJ1";
const FLAG_NOISES: u32 = 1;
const FLAG_TARGET: u32 = 2;

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_vector(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for &x in v.iter() {
        push_f64(buf, x);
    }
}

fn push_matrix_rows(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            push_f64(buf, m[(i, j)]);
        }
    }
}

impl Trajectory {
    /// Binary record: magic, header (dim, n, seed, schedule, flags), then
    /// little-endian doubles for the mean matrix, initial point, optional
    /// target, average, iterates, observations and optional noises.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&self.n.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        push_f64(&mut buf, self.schedule.c0());
        push_f64(&mut buf, self.schedule.gamma());
        buf.extend_from_slice(&self.schedule.k0().to_le_bytes());
        let mut flags = 0u32;
        if self.noises.is_some() {
            flags |= FLAG_NOISES;
        }
        if self.theta_star.is_some() {
            flags |= FLAG_TARGET;
        }
        buf.extend_from_slice(&flags.to_le_bytes());

        push_matrix_rows(&mut buf, &self.abar);
        push_vector(&mut buf, &self.theta0);
        if let Some(star) = &self.theta_star {
            push_vector(&mut buf, star);
        }
        push_vector(&mut buf, &self.average);
        for theta in &self.iterates {
            push_vector(&mut buf, theta);
        }
        for (a, b) in &self.observations {
            push_matrix_rows(&mut buf, a);
            push_vector(&mut buf, b);
        }
        if let Some(noises) = &self.noises {
            for eps in noises {
                push_vector(&mut buf, eps);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
            if *pos + len > buf.len() {
                return Err(LsaError::MalformedRecord("truncated record".into()));
            }
            let out = &buf[*pos..*pos + len];
            *pos += len;
            Ok(out)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(LsaError::MalformedRecord("bad magic".into()));
        }
        let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let c0 = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let gamma = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let k0 = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let flags = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let schedule = StepSchedule::new(c0, gamma, k0)
            .map_err(|e| LsaError::MalformedRecord(format!("bad schedule: {e}")))?;

        let read_f64 = |pos: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let read_vec = |pos: &mut usize, len: usize| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(len);
            for i in 0..len {
                v[i] = read_f64(pos)?;
            }
            Ok(v)
        };
        let read_mat = |pos: &mut usize, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m[(i, j)] = read_f64(pos)?;
                }
            }
            Ok(m)
        };

        let abar = read_mat(&mut pos, d, d)?;
        let theta0 = read_vec(&mut pos, d)?;
        let theta_star = if flags & FLAG_TARGET != 0 {
            Some(read_vec(&mut pos, d)?)
        } else {
            None
        };
        let average = read_vec(&mut pos, d)?;
        let mut iterates = Vec::with_capacity(n as usize);
        for _ in 0..n {
            iterates.push(read_vec(&mut pos, d)?);
        }
        let mut observations = Vec::with_capacity((n - 1) as usize);
        for _ in 1..n {
            let a = read_mat(&mut pos, d, d)?;
            let b = read_vec(&mut pos, d)?;
            observations.push((a, b));
        }
        let noises = if flags & FLAG_NOISES != 0 {
            let mut v = Vec::with_capacity((n - 1) as usize);
            for _ in 1..n {
                v.push(read_vec(&mut pos, d)?);
            }
            Some(v)
        } else {
            None
        };
        if pos != buf.len() {
            return Err(LsaError::MalformedRecord("trailing bytes".into()));
        }
        Ok(Trajectory {
            schedule,
            n,
            seed,
            theta0,
            abar,
            theta_star,
            observations,
            iterates,
            average,
            noises,
        })
    }

    /// CSV rendering with columns `k,theta_1,..,theta_d`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("k");
        for i in 1..=d {
            out.push_str(&format!(",theta_{i}"));
        }
        out.push('\n');
        for (k, theta) in self.iterates.iter().enumerate() {
            out.push_str(&k.to_string());
            for i in 0..d {
                out.push_str(&format!(",{}", theta[i]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance;
    use crate::model::{make_gaussian_identity_1d, make_random_hurwitz};
    use crate::schedule::q_weighted_norm;

    fn small_instance(dim: usize, seed: u64) -> LsaInstance {
        make_random_hurwitz(dim, seed, (0.5, 1.5), 0.5).unwrap()
    }

    #[test]
    fn one_step_from_zero() {
        // With theta_0 = 0 the first step is theta_1 = alpha_1 * b_1; for
        // A_1 = I, b_1 = (1, 1) and alpha_1 = 0.1 that is (0.1, 0.1).
        let inst = small_instance(2, 1);
        let s = StepSchedule::new(0.1, 0.75, 1).unwrap();
        let theta0 = DVector::zeros(2);
        let traj = lsa_run(&inst, &s, 2, &theta0, 7).unwrap();
        let (a1, b1) = &traj.observations[0];
        let expected = &theta0 - s.step_size(1) * (a1 * &theta0 - b1);
        assert_eq!(traj.iterates[1], expected);
        // the literal identity-observation case
        let hand = 0.1 * DVector::from_element(2, 1.0);
        let identity_step =
            &theta0 - 0.1 * (DMatrix::identity(2, 2) * &theta0 - DVector::from_element(2, 1.0));
        assert_eq!(identity_step, hand);
    }

    #[test]
    fn recursion_reproducible_from_stored_observations() {
        let inst = small_instance(3, 5);
        let s = StepSchedule::new(0.2, 2.0 / 3.0, 4).unwrap();
        let traj = lsa_run(&inst, &s, 64, &DVector::zeros(3), 11).unwrap();
        let mut theta = traj.theta0.clone();
        for k in 1..traj.n {
            let (a, b) = &traj.observations[(k - 1) as usize];
            theta = &theta - s.step_size(k) * (a * &theta - b);
            assert_eq!(theta, traj.iterates[k as usize], "k = {k}");
        }
    }

    #[test]
    fn average_matches_mean_of_iterates() {
        let inst = small_instance(2, 9);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 256, &DVector::zeros(2), 3).unwrap();
        let mut mean = DVector::zeros(2);
        for theta in &traj.iterates {
            mean += theta;
        }
        mean /= traj.n as f64;
        let rel = (&mean - &traj.average).norm() / mean.norm().max(1e-300);
        assert!(rel < 1e-12);
    }

    #[test]
    fn same_seed_identical_bitwise() {
        let inst = small_instance(2, 1);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let t1 = lsa_run(&inst, &s, 128, &DVector::zeros(2), 42).unwrap();
        let t2 = lsa_run(&inst, &s, 128, &DVector::zeros(2), 42).unwrap();
        assert_eq!(t1.iterates, t2.iterates);
        let (avg, last) = lsa_run_streaming(&inst, &s, 128, &DVector::zeros(2), 42).unwrap();
        assert_eq!(avg, t1.average);
        assert_eq!(&last, t1.iterates.last().unwrap());
    }

    #[test]
    fn noiseless_error_contracts_in_q_norm() {
        let inst = make_random_hurwitz(3, 17, (0.5, 1.5), 0.0).unwrap();
        let consts =
            crate::schedule::stability_constants(inst.abar(), None, inst.bound_a()).unwrap();
        let s = StepSchedule::new(consts.alpha_inf.min(0.9), 0.7, 2).unwrap();
        let traj = lsa_run(&inst, &s, 128, &DVector::from_element(3, 2.0), 5).unwrap();
        let sqrt_q = linalg::spd_sqrt(&consts.q).unwrap();
        let mut prev = f64::INFINITY;
        for theta in &traj.iterates {
            let err = (&sqrt_q * (theta - inst.theta_star())).norm();
            assert!(err <= prev + 1e-13);
            prev = err;
        }
    }

    #[test]
    fn divergence_guard_fires() {
        let inst = make_gaussian_identity_1d(3);
        // c0 far above alpha_inf = 1/2 for this instance: the recursion
        // multiplies the error by (1 - alpha_k) with |1 - alpha_k| > 1.
        let s = StepSchedule::new(40.0, 0.6, 1).unwrap();
        let r = lsa_run(&inst, &s, 4096, &DVector::from_element(1, 1.0), 1);
        assert!(matches!(r, Err(LsaError::Divergence { .. })));
    }

    #[test]
    fn product_conventions() {
        let inst = small_instance(3, 23);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 32, &DVector::zeros(3), 2).unwrap();
        // empty range: identity
        let g = transition_product(&traj, 9, 5).unwrap();
        assert_eq!(g, DMatrix::identity(3, 3));
        // re-multiplication oracle over a short window
        let g = transition_product(&traj, 3, 8).unwrap();
        let mut oracle = DMatrix::identity(3, 3);
        for l in 3..=8u64 {
            let (a, _) = &traj.observations[(l - 1) as usize];
            oracle = (DMatrix::identity(3, 3) - s.step_size(l) * a) * oracle;
        }
        assert!((g - oracle).norm() < 1e-13);
        // out of range
        assert!(transition_product(&traj, 0, 5).is_err());
        assert!(transition_product(&traj, 1, 40).is_err());
    }

    #[test]
    fn scalar_product_hand_value() {
        // scalar A = 2 with alphas (0.1, 0.2): (1-0.2*2)(1-0.1*2) = 0.48.
        let a = DMatrix::from_element(1, 1, 2.0);
        let traj = Trajectory {
            schedule: StepSchedule::new(0.1, 0.75, 1).unwrap(),
            n: 3,
            seed: 0,
            theta0: DVector::zeros(1),
            abar: a.clone(),
            theta_star: Some(DVector::zeros(1)),
            observations: vec![
                (a.clone(), DVector::zeros(1)),
                (a.clone(), DVector::zeros(1)),
            ],
            iterates: vec![DVector::zeros(1); 3],
            average: DVector::zeros(1),
            noises: Some(vec![DVector::zeros(1); 2]),
        };
        // step sizes: use explicit alphas by picking schedule values
        let a1 = traj.schedule.step_size(1);
        let a2 = traj.schedule.step_size(2);
        let g = transition_product(&traj, 1, 2).unwrap();
        assert!((g[(0, 0)] - (1.0 - 2.0 * a2) * (1.0 - 2.0 * a1)).abs() < 1e-15);
    }

    #[test]
    fn noiseless_decomposition_is_pure_transient() {
        let inst = make_random_hurwitz(2, 31, (0.5, 1.5), 0.0).unwrap();
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 64, &DVector::from_element(2, 1.0), 3).unwrap();
        let dec = error_decompose(&traj, 2).unwrap();
        for k in 0..traj.n as usize {
            for level in &dec.levels {
                assert!(level[k].norm() == 0.0);
            }
            assert!(dec.remainder[k].norm() == 0.0);
            let err = &traj.iterates[k] - inst.theta_star();
            assert!((&dec.transient[k] - &err).norm() <= 1e-10 * (1.0 + err.norm()));
        }
    }

    #[test]
    fn depth_zero_remainder_satisfies_its_recursion() {
        let inst = small_instance(2, 3);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 128, &DVector::zeros(2), 9).unwrap();
        let dec = error_decompose(&traj, 0).unwrap();
        // replay: H_k = (I - a_k A_k) H_{k-1} - a_k (A_k - Abar) J_{k-1}
        let eye = DMatrix::identity(2, 2);
        let mut h = DVector::<f64>::zeros(2);
        for k in 1..traj.n {
            let alpha = s.step_size(k);
            let (a_k, _) = &traj.observations[(k - 1) as usize];
            h = (&eye - alpha * a_k) * h
                - alpha * ((a_k - &traj.abar) * &dec.levels[0][(k - 1) as usize]);
            assert!(
                (&h - &dec.remainder[k as usize]).norm() <= 1e-12 * (1.0 + h.norm()),
                "k = {k}"
            );
        }
    }

    #[test]
    fn reconstruction_holds_at_all_depths() {
        let inst = small_instance(3, 13);
        let s = StepSchedule::new(0.2, 2.0 / 3.0, 8).unwrap();
        let traj = lsa_run(&inst, &s, 1000, &DVector::from_element(3, 0.5), 21).unwrap();
        for depth in 0..=2 {
            let dec = error_decompose(&traj, depth).unwrap();
            let err = dec.reconstruction_error(&traj).unwrap();
            assert!(err <= 1e-10, "depth {depth}: {err}");
        }
    }

    #[test]
    fn depth_two_refines_depth_zero_remainder() {
        let inst = small_instance(2, 13);
        let s = StepSchedule::new(0.2, 2.0 / 3.0, 8).unwrap();
        let traj = lsa_run(&inst, &s, 1000, &DVector::zeros(2), 4).unwrap();
        let d0 = error_decompose(&traj, 0).unwrap();
        let d2 = error_decompose(&traj, 2).unwrap();
        for k in 0..traj.n as usize {
            let lhs = &d0.remainder[k];
            let rhs = &d2.levels[1][k] + &d2.levels[2][k] + &d2.remainder[k];
            assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()), "k = {k}");
        }
    }

    #[test]
    fn averaged_error_identity() {
        let inst = small_instance(3, 37);
        let s = StepSchedule::new(0.2, 0.7, 8).unwrap();
        let traj = lsa_run(&inst, &s, 512, &DVector::from_element(3, 0.3), 6).unwrap();
        let dec = error_decompose(&traj, 0).unwrap();
        let n = traj.n as usize;
        let mut acc = DVector::<f64>::zeros(3);
        for k in 0..n {
            acc += &dec.transient[k];
            acc += &dec.levels[0][k];
            acc += &dec.remainder[k];
        }
        acc /= n as f64;
        let truth = &traj.average - inst.theta_star();
        assert!((&acc - &truth).norm() <= 1e-10 * (1.0 + truth.norm()));
    }

    #[test]
    fn linear_statistic_matches_weighted_noise_sum() {
        let inst = small_instance(4, 51);
        let s = StepSchedule::new(0.2, 0.7, 8).unwrap();
        let n = 512u64;
        let traj = lsa_run(&inst, &s, n, &DVector::zeros(4), 8).unwrap();
        let dec = error_decompose(&traj, 0).unwrap();
        let weights = covariance::weight_matrices(&traj.abar, &s, n);
        let residual =
            linear_statistic_identity(&dec, &weights, traj.noises.as_ref().unwrap()).unwrap();
        assert!(residual <= 1e-8, "residual = {residual}");
    }

    #[test]
    fn linear_statistic_scalar_case_tight() {
        let inst = make_gaussian_identity_1d(5);
        let s = StepSchedule::new(0.4, 0.75, 2).unwrap();
        let n = 64u64;
        let traj = lsa_run(&inst, &s, n, &DVector::zeros(1), 12).unwrap();
        let dec = error_decompose(&traj, 0).unwrap();
        let weights = covariance::weight_matrices(&traj.abar, &s, n);
        let residual =
            linear_statistic_identity(&dec, &weights, traj.noises.as_ref().unwrap()).unwrap();
        assert!(residual <= 1e-10, "residual = {residual}");
    }

    #[test]
    fn stability_diagnostic_respects_bound() {
        let inst = make_random_hurwitz(2, 3, (0.5, 1.5), 0.3).unwrap();
        let consts =
            crate::schedule::stability_constants(inst.abar(), None, inst.bound_a()).unwrap();
        let s = StepSchedule::new(consts.alpha_inf * 0.9, 0.7, 8).unwrap();
        let diag = stability_diagnostic(&inst, &s, 1, 64, 2.0, 1000, 3).unwrap();
        // One-sided check with slack for Monte-Carlo error.
        let mc_slack = 2.0 * diag.empirical / (1000f64).sqrt();
        assert!(
            diag.empirical <= diag.bound + mc_slack,
            "empirical {} vs bound {}",
            diag.empirical,
            diag.bound
        );
        // Envelope shrinks as the window grows.
        let longer = stability_diagnostic(&inst, &s, 1, 128, 2.0, 100, 3).unwrap();
        assert!(longer.bound < diag.bound);
    }

    #[test]
    fn noiseless_diagnostic_is_deterministic() {
        let inst = make_random_hurwitz(2, 7, (0.8, 1.2), 0.0).unwrap();
        let consts =
            crate::schedule::stability_constants(inst.abar(), None, 1.0).unwrap();
        let s = StepSchedule::new(consts.alpha_inf * 0.8, 0.7, 4).unwrap();
        let diag = stability_diagnostic(&inst, &s, 2, 40, 4.0, 100, 9).unwrap();
        assert!(diag.ratio <= 1.0 + 1e-12);
        // Deterministic: empirical equals the norm of the mean product.
        let g = covariance::mean_transition_product(inst.abar(), &s, 2, 40);
        assert!((diag.empirical - linalg::spectral_norm(&g)).abs() < 1e-12);
    }

    #[test]
    fn q_norm_of_observed_factor_contracts() {
        // sanity on the Q-weighted norm helper used above
        let inst = make_random_hurwitz(3, 3, (0.5, 1.5), 0.0).unwrap();
        let consts =
            crate::schedule::stability_constants(inst.abar(), None, 1.0).unwrap();
        let alpha = consts.alpha_inf / 2.0;
        let m = DMatrix::identity(3, 3) - alpha * inst.abar();
        let norm = q_weighted_norm(&m, &consts.q).unwrap();
        assert!(norm * norm <= 1.0 - consts.a * alpha + 1e-12);
    }

    #[test]
    fn binary_roundtrip_preserves_everything() {
        let inst = small_instance(2, 61);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 32, &DVector::from_element(2, 0.1), 77).unwrap();
        let mut buf = Vec::new();
        traj.write_binary(&mut buf).unwrap();
        let back = Trajectory::read_binary(&buf[..]).unwrap();
        assert_eq!(back.n, traj.n);
        assert_eq!(back.seed, traj.seed);
        assert_eq!(back.iterates, traj.iterates);
        assert_eq!(back.observations, traj.observations);
        assert_eq!(back.noises, traj.noises);
        assert_eq!(back.average, traj.average);
        assert_eq!(back.theta_star, traj.theta_star);
    }

    #[test]
    fn csv_has_expected_shape() {
        let inst = small_instance(2, 61);
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 8, &DVector::zeros(2), 1).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0], "k,theta_1,theta_2");
    }
}
