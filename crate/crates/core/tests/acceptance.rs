//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities. Every tolerance is pinned here, in code.
//!
//! Monte-Carlo criteria freeze their seeds, so reruns are bit-identical and
//! the asserted margins are stable.

use std::time::Instant;

use lsa_core::bootstrap::{bootstrap_run, coverage_experiment, WeightScheme};
use lsa_core::covariance::{
    covariance_gap_series, sigma_n, sigma_n_boot, weight_matrices,
};
use lsa_core::engine::{error_decompose, expansion_moment_profile, linear_statistic_identity, lsa_run};
use lsa_core::gaussapprox::{
    bootstrap_validity_experiment, clt_rate_experiment, kolmogorov_normal_vs_normal_1d,
    lower_bound_sigma_n_1d, rate_fit, CovarianceReference,
};
use lsa_core::linalg;
use lsa_core::model::{make_random_hurwitz, LsaInstance};
use lsa_core::schedule::{
    block_size_value, check_bootstrap_assumptions, lyapunov_solve, q_weighted_norm,
    rate_envelope_phi, stability_constants, weight_norm_bound, StabilityConstants, StepSchedule,
};
use lsa_core::series::{DistanceSeries, Metric, ReferenceLaw, SeriesPoint};
use nalgebra::{DMatrix, DVector};

fn scaled_schedule(instance: &LsaInstance, frac: f64, gamma: f64, k0: u64) -> StepSchedule {
    let consts = stability_constants(instance.abar(), None, instance.bound_a()).unwrap();
    StepSchedule::new(consts.alpha_inf * frac, gamma, k0).unwrap()
}

#[test]
fn acceptance_01_exact_identities() {
    let start = Instant::now();
    let n = 1u64 << 10;
    let mut worst_reconstruction = 0.0f64;
    let mut worst_linear = 0.0f64;
    let mut worst_average = 0.0f64;

    for dim in 1..=4usize {
        let instance = make_random_hurwitz(dim, 100 + dim as u64, (0.5, 1.5), 0.5).unwrap();
        let schedule = scaled_schedule(&instance, 0.8, 2.0 / 3.0, 8);
        let theta0 = DVector::from_element(dim, 0.4);
        let traj = lsa_run(&instance, &schedule, n, &theta0, 9 + dim as u64).unwrap();

        // (a) iterate-error reconstruction at every depth
        for depth in 0..=2usize {
            let dec = error_decompose(&traj, depth).unwrap();
            let err = dec.reconstruction_error(&traj).unwrap();
            worst_reconstruction = worst_reconstruction.max(err);
        }

        // (b) summed linear statistic vs weighted noise sum
        let dec = error_decompose(&traj, 0).unwrap();
        let weights = weight_matrices(instance.abar(), &schedule, n);
        let residual =
            linear_statistic_identity(&dec, &weights, traj.noises.as_ref().unwrap()).unwrap();
        worst_linear = worst_linear.max(residual);

        // (c) averaged-error representation
        let mut acc = DVector::<f64>::zeros(dim);
        for k in 0..n as usize {
            acc += &dec.transient[k];
            acc += &dec.levels[0][k];
            acc += &dec.remainder[k];
        }
        acc /= n as f64;
        let truth = &traj.average - instance.theta_star();
        worst_average = worst_average
            .max((&acc - &truth).norm() / (1.0 + truth.norm()));

        // (e) constant-weight collapse is bit-exact
        let ens = bootstrap_run(&traj, 4, WeightScheme::Constant, 5).unwrap();
        for avg in &ens.averages {
            assert_eq!(avg, &traj.average, "collapse failed at dim {dim}");
        }
    }

    // (d) telescoping identity over schedules and contraction rates
    let mut worst_telescope = 0.0f64;
    for (c0, gamma, k0) in [(0.5, 0.6, 4u64), (0.3, 0.75, 2), (0.8, 0.9, 16)] {
        let schedule = StepSchedule::new(c0, gamma, k0).unwrap();
        for b_frac in [0.3, 0.9] {
            let b = b_frac / schedule.step_size(0);
            let k = 1000u64;
            let mut lhs = 0.0f64;
            for j in 1..=k {
                let mut tail = 1.0f64;
                for l in (j + 1)..=k {
                    tail *= 1.0 - schedule.step_size(l) * b;
                }
                lhs += schedule.step_size(j) * tail;
            }
            let mut full = 1.0f64;
            for l in 1..=k {
                full *= 1.0 - schedule.step_size(l) * b;
            }
            let rhs = (1.0 - full) / b;
            worst_telescope = worst_telescope.max((lhs - rhs).abs() / rhs.abs());
        }
    }

    let elapsed = start.elapsed();
    assert!(worst_reconstruction <= 1e-8);
    assert!(worst_linear <= 1e-8);
    assert!(worst_average <= 1e-8);
    assert!(worst_telescope <= 1e-8);
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 exact identities: PASS (reconstruction {worst_reconstruction:.2e}, linear {worst_linear:.2e}, average {worst_average:.2e}, telescoping {worst_telescope:.2e}, collapse exact, {elapsed:?})"
    );
}

#[test]
fn acceptance_02_lyapunov_stability() {
    let start = Instant::now();
    let mut worst_residual = 0.0f64;
    let mut worst_margin = f64::NEG_INFINITY;
    for i in 0..20u64 {
        let dim = 2 + (i % 7) as usize; // dimensions 2..=8
        let instance = make_random_hurwitz(dim, 200 + i, (0.3, 2.0), 0.0).unwrap();
        let p = DMatrix::<f64>::identity(dim, dim);
        let q = lyapunov_solve(instance.abar(), &p).unwrap();
        let residual = linalg::spectral_norm(
            &(instance.abar().transpose() * &q + &q * instance.abar() - &p),
        );
        worst_residual = worst_residual.max(residual);

        let consts = stability_constants(instance.abar(), None, 1.0).unwrap();
        for step in 0..=50 {
            let alpha = consts.alpha_inf * step as f64 / 50.0;
            let m = DMatrix::identity(dim, dim) - alpha * instance.abar();
            let norm = q_weighted_norm(&m, &consts.q).unwrap();
            worst_margin = worst_margin.max(norm * norm - (1.0 - consts.a * alpha));
        }
    }
    let elapsed = start.elapsed();
    assert!(worst_residual <= 1e-10, "residual {worst_residual:.3e}");
    assert!(worst_margin <= 1e-12, "contraction margin {worst_margin:.3e}");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 2 Lyapunov/stability: PASS (max residual {worst_residual:.2e}, max contraction excess {worst_margin:.2e}, {elapsed:?})"
    );
}

#[test]
fn acceptance_03_covariance_gap_rate() {
    let start = Instant::now();
    // Scalar unit instance: the gap series is pure schedule algebra, so the
    // schedule may run above the conservative Lyapunov step cap as long as
    // the deterministic products contract.
    let abar = DMatrix::from_element(1, 1, 1.0);
    let sigma_eps = DMatrix::from_element(1, 1, 1.0);
    let grid: Vec<u64> = (7..=14).map(|e| 1u64 << e).collect();
    let mut report = Vec::new();
    for gamma in [0.6, 2.0 / 3.0, 0.8] {
        let schedule = StepSchedule::new(0.8, gamma, 1).unwrap();
        let series = covariance_gap_series(&abar, &sigma_eps, &schedule, &grid).unwrap();
        let fit = rate_fit(&series).unwrap();
        let target = gamma - 1.0;
        assert!(
            (fit.slope - target).abs() <= 0.08,
            "gamma {gamma}: slope {} vs target {target}",
            fit.slope
        );
        report.push(format!("gamma {gamma:.3}: {:+.3} (target {target:+.3})", fit.slope));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 covariance-gap rate: PASS ({}, {elapsed:?})",
        report.join("; ")
    );
}

#[test]
fn acceptance_04_bootstrap_covariance_unbiased() {
    let start = Instant::now();
    let n = 1u64 << 10;
    let replications = 200usize;
    let instance = make_random_hurwitz(2, 33, (0.5, 1.5), 0.6).unwrap();
    let schedule = scaled_schedule(&instance, 0.8, 2.0 / 3.0, 4);
    let weights = weight_matrices(instance.abar(), &schedule, n);
    let expected = sigma_n(instance.abar(), instance.sigma_eps(), &schedule, n);

    let theta0 = DVector::zeros(2);
    let mut sums = DMatrix::<f64>::zeros(2, 2);
    let mut sums_sq = DMatrix::<f64>::zeros(2, 2);
    for rep in 0..replications {
        let traj = lsa_run(&instance, &schedule, n, &theta0, 4000 + rep as u64).unwrap();
        let boot = sigma_n_boot(&traj, &weights).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                sums[(i, j)] += boot[(i, j)];
                sums_sq[(i, j)] += boot[(i, j)] * boot[(i, j)];
            }
        }
    }
    let rf = replications as f64;
    let mut worst_z = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let mean = sums[(i, j)] / rf;
            let var = (sums_sq[(i, j)] / rf - mean * mean).max(0.0);
            let se = (var / rf).sqrt();
            let z = (mean - expected[(i, j)]).abs() / se;
            worst_z = worst_z.max(z);
            assert!(
                z <= 3.0,
                "entry ({i},{j}): mean {mean:.6e} vs expected {:.6e} is {z:.2} standard errors off",
                expected[(i, j)]
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 4 bootstrap covariance unbiased: PASS (worst deviation {worst_z:.2} standard errors over R={replications}, {elapsed:?})"
    );
}

#[test]
fn acceptance_05_lower_bound_rate() {
    let start = Instant::now();
    let grid: Vec<u64> = (8..=16).map(|e| 1u64 << e).collect();
    let mut report = Vec::new();
    for gamma in [2.0 / 3.0, 0.8] {
        let schedule = StepSchedule::new(0.5, gamma, 1).unwrap();
        let points: Vec<SeriesPoint> = grid
            .iter()
            .map(|&n| SeriesPoint {
                n,
                distance: kolmogorov_normal_vs_normal_1d(lower_bound_sigma_n_1d(&schedule, n)),
                std_err: 0.0,
            })
            .collect();
        let series = DistanceSeries::new(
            Metric::Kolmogorov1dExact,
            ReferenceLaw::StandardNormal,
            points,
        );
        let fit = rate_fit(&series).unwrap();
        let target = -(1.0 - gamma);
        assert!(
            (fit.slope - target).abs() <= 0.08,
            "gamma {gamma}: slope {} vs target {target}",
            fit.slope
        );
        report.push(format!("gamma {gamma:.3}: {:+.3} (target {target:+.3})", fit.slope));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 5 lower-bound rate: PASS ({}, {elapsed:?})",
        report.join("; ")
    );
}

#[test]
fn acceptance_06_clt_rate() {
    let start = Instant::now();
    let instance = make_random_hurwitz(2, 5, (0.9, 1.1), 3.0).unwrap();
    let schedule = scaled_schedule(&instance, 0.8, 2.0 / 3.0, 2);
    let grid: Vec<u64> = (8..=13).map(|e| 1u64 << e).collect();
    let series = clt_rate_experiment(
        &instance,
        &schedule,
        &grid,
        10_000,
        32,
        91,
        CovarianceReference::SigmaInf,
        None,
    )
    .unwrap();
    let fit = rate_fit(&series).unwrap();
    let elapsed = start.elapsed();
    assert!(
        (-0.45..=-0.21).contains(&fit.slope),
        "slope {} outside [-0.45, -0.21]",
        fit.slope
    );
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 6 CLT half-space rate: PASS (slope {:+.3} in [-0.45, -0.21], r2 {:.3}, {elapsed:?})",
        fit.slope, fit.r_squared
    );
}

#[test]
fn acceptance_07_bootstrap_validity_trend() {
    let start = Instant::now();
    let instance = make_random_hurwitz(1, 3, (0.8, 1.2), 0.5).unwrap();
    let schedule = scaled_schedule(&instance, 0.8, 0.8, 4);
    let grid: Vec<u64> = (8..=12).map(|e| 1u64 << e).collect();
    let result = bootstrap_validity_experiment(
        &instance,
        &schedule,
        &grid,
        2000,
        50,
        5000,
        8,
        77,
        WeightScheme::TwoPoint,
        None,
    )
    .unwrap();
    let fit = rate_fit(&result.median).unwrap();
    let medians: Vec<f64> = result.median.points.iter().map(|p| p.distance).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let elapsed = start.elapsed();
    assert!(decreasing, "medians not decreasing: {medians:?}");
    assert!(fit.slope <= -0.25, "slope {} above -0.25", fit.slope);
    assert!(elapsed.as_secs_f64() < 1200.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 7 bootstrap validity trend: PASS (slope {:+.3} <= -0.25, medians decreasing, {elapsed:?})",
        fit.slope
    );
}

#[test]
fn acceptance_08_coverage() {
    let start = Instant::now();
    let instance = make_random_hurwitz(2, 6, (0.9, 1.1), 2.0).unwrap();
    let schedule = scaled_schedule(&instance, 0.8, 2.0 / 3.0, 2);
    let summary = coverage_experiment(
        &instance,
        &schedule,
        1 << 12,
        200,
        500,
        0.9,
        WeightScheme::TwoPoint,
        55,
    )
    .unwrap();
    let elapsed = start.elapsed();
    for (i, entry) in summary.per_coordinate.iter().enumerate() {
        assert!(
            (0.86..=0.94).contains(&entry.coverage),
            "coordinate {i}: coverage {} outside [0.86, 0.94]",
            entry.coverage
        );
    }
    assert_eq!(summary.divergent_runs, 0);
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    let coords: Vec<String> = summary
        .per_coordinate
        .iter()
        .map(|e| format!("{:.3}", e.coverage))
        .collect();
    println!(
        "ACCEPTANCE 8 coverage: PASS (per-coordinate [{}] in [0.86, 0.94], sup {:.3}, ellipsoid {:.3}, {elapsed:?})",
        coords.join(", "),
        summary.sup_norm.coverage,
        summary.ellipsoid.coverage
    );
}

#[test]
fn acceptance_09_scale_separation() {
    let start = Instant::now();
    let instance = make_random_hurwitz(1, 3, (1.0, 1.0), 0.5).unwrap();
    let schedule = StepSchedule::new(0.5, 2.0 / 3.0, 2).unwrap();
    let profile = expansion_moment_profile(&instance, &schedule, 1 << 14, 2000, 17).unwrap();
    let elapsed = start.elapsed();
    let mut report = Vec::new();
    for level in 0..3usize {
        let slope = profile.tail_slope(level).unwrap();
        let target = (level as f64 + 1.0) / 2.0;
        assert!(
            (slope - target).abs() <= 0.15,
            "level {level}: slope {slope} vs target {target}"
        );
        report.push(format!("l{level} {slope:+.3} (target {target:+.1})"));
    }
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 9 scale separation: PASS ({}, {elapsed:?})",
        report.join("; ")
    );
}

/// Independent reimplementation of the formula evaluators using a different
/// arithmetic path (exp/ln instead of powers, re-associated products).
mod oracle {
    pub fn pow(base: f64, exponent: f64) -> f64 {
        (exponent * base.ln()).exp()
    }

    pub fn block_size(n: u64, d: usize, bound_a: f64, kappa_q: f64, a: f64, gamma: f64) -> f64 {
        let log_term = 1.0 + 2.0 * (10.0f64.ln() + 3.0 * (n as f64).ln() + (d as f64).ln());
        let denom = a * (2.0 - pow(2.0, gamma));
        let root = 8.0 * bound_a * pow(kappa_q, 0.5) * log_term / denom;
        root * root
    }

    pub fn phi(n: u64, c0: f64, gamma: f64) -> f64 {
        let nf = n as f64;
        let c = pow(c0, 1.5);
        if (gamma - 2.0 / 3.0).abs() < 1e-12 {
            c * nf.ln() / pow(nf, 0.5)
        } else if gamma < 2.0 / 3.0 {
            2.0 * c / ((1.0 - 1.5 * gamma) * pow(nf, 1.5 * gamma - 0.5))
        } else {
            c / ((1.5 * gamma - 1.0) * pow(nf, 0.5))
        }
    }

    /// The four offset thresholds, in report order.
    pub fn offset_thresholds(
        h: f64,
        bound_a: f64,
        kappa_q: f64,
        a: f64,
        c0: f64,
        gamma: f64,
        alpha_inf: f64,
        n: u64,
    ) -> [f64; 4] {
        let sk = pow(kappa_q, 0.5);
        let e = (1.0f64).exp();
        let ln5n = (5.0 * n as f64).ln();
        [
            2.0 * h * bound_a * sk,
            c0 * h / if alpha_inf < 1.0 { alpha_inf } else { 1.0 },
            8.0 * bound_a * bound_a * c0 * sk * e * h / (a * (2.0 - pow(2.0, gamma))),
            c0 * ln5n * ln5n / if a < 1.0 { a } else { 1.0 },
        ]
    }

    pub fn sample_size_rhs(n: u64, d: usize, eps_sup: f64, c_bound: f64) -> f64 {
        let nf = n as f64;
        let log_dn = (10.0 * d as f64 * nf).ln();
        let c2 = eps_sup * eps_sup * c_bound * c_bound;
        pow(2.0, 0.5) * 8.0 * c2 * pow(log_dn, 0.5) / pow(nf, 0.5) + 8.0 * c2 * log_dn / (3.0 * nf)
    }

    pub fn weight_bound(kappa_q: f64, c0: f64, a: f64, gamma: f64) -> f64 {
        pow(kappa_q, 0.5) * (c0 + 2.0 / (a * (1.0 - gamma)))
    }
}

#[test]
fn acceptance_10_formula_evaluators() {
    use rand::Rng;

    let start = Instant::now();
    let mut rng = lsa_core::rngutil::stream(2024, 0);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a: f64 = rng.gen_range(0.05..2.0);
        let kappa_q: f64 = rng.gen_range(1.0..8.0);
        let bound_a: f64 = rng.gen_range(0.2..4.0);
        let c0: f64 = rng.gen_range(0.01..1.5);
        let gamma: f64 = rng.gen_range(0.51..0.99);
        let k0: u64 = rng.gen_range(1..1_000_000);
        let n: u64 = rng.gen_range(2..10_000_000);
        let d: usize = rng.gen_range(1..64);
        let eps_sup: f64 = rng.gen_range(0.1..10.0);
        let lambda: f64 = rng.gen_range(0.01..5.0);

        let schedule = StepSchedule::new(c0, gamma, k0).unwrap();
        let consts = StabilityConstants {
            q: DMatrix::identity(1, 1),
            a,
            alpha_inf: rng.gen_range(0.05..1.5),
            kappa_q,
            b_q: kappa_q.sqrt() * bound_a,
            norm_abar_q: 1.0,
            lambda_min_q: 1.0,
            lambda_max_q: kappa_q,
        };

        // h(n) before rounding
        let impl_h = block_size_value(n, d, &consts, &schedule);
        let oracle_h = oracle::block_size(n, d, bound_a, kappa_q, a, gamma);
        worst = worst.max(rel(impl_h, oracle_h));

        // phi_n
        let impl_phi = rate_envelope_phi(n, &schedule);
        let oracle_phi = oracle::phi(n, c0, gamma);
        if oracle_phi > 0.0 {
            worst = worst.max(rel(impl_phi, oracle_phi));
        } else {
            assert_eq!(impl_phi, 0.0);
        }

        // the four offset conditions and the sample-size condition, read
        // back from the report
        let c_bound = weight_norm_bound(&consts, &schedule);
        let report = check_bootstrap_assumptions(
            &schedule, &consts, n, d, eps_sup, lambda, c_bound, None,
        );
        let h_ceil = impl_h.ceil();
        let thresholds = oracle::offset_thresholds(
            h_ceil,
            bound_a,
            kappa_q,
            a,
            c0,
            gamma,
            consts.alpha_inf,
            n,
        );
        for (idx, expected) in thresholds.iter().enumerate() {
            worst = worst.max(rel(report.conditions[idx].required, *expected));
        }
        let a5 = report
            .conditions
            .iter()
            .find(|c| c.name.contains("Sigma_inf"))
            .unwrap();
        worst = worst.max(rel(a5.required, oracle::sample_size_rhs(n, d, eps_sup, c_bound)));
        worst = worst.max(rel(
            c_bound,
            oracle::weight_bound(kappa_q, c0, a, gamma),
        ));
    }
    let elapsed = start.elapsed();
    assert!(worst <= 1e-12, "worst relative deviation {worst:.3e}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 10 formula evaluators: PASS (worst relative deviation {worst:.2e} over 100 tuples, {elapsed:?})"
    );
}
