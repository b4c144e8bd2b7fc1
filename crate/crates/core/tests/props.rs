//! Property tests for cross-module invariants.

use lsa_core::bootstrap::{bootstrap_run, confidence_sets, WeightScheme};
use lsa_core::engine::lsa_run;
use lsa_core::model::{make_random_hurwitz, noise_at_solution};
use lsa_core::schedule::{check_step_size, stability_constants, StepSchedule};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Telescoping identity for non-increasing step sequences with alpha_0 <= 1/b:
/// `sum_j alpha_j prod_{l>j} (1 - alpha_l b) = (1 - prod_l (1 - alpha_l b))/b`.
fn telescoping_residual(schedule: &StepSchedule, b: f64, k: u64) -> f64 {
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
    (lhs - rhs).abs() / rhs.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn telescoping_identity_holds(
        c0 in 0.05f64..0.9,
        gamma in 0.51f64..0.99,
        k0 in 1u64..32,
        b_scale in 0.1f64..1.0,
        k in 2u64..1000,
    ) {
        let schedule = StepSchedule::new(c0, gamma, k0).unwrap();
        // alpha_0 <= 1/b by construction
        let b = b_scale / schedule.step_size(0);
        prop_assert!(telescoping_residual(&schedule, b, k) <= 1e-10);
    }

    #[test]
    fn trajectories_are_seed_deterministic(
        dim in 1usize..4,
        instance_seed in 0u64..50,
        run_seed in 0u64..50,
    ) {
        let inst = make_random_hurwitz(dim, instance_seed, (0.5, 1.5), 0.5).unwrap();
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let theta0 = DVector::zeros(dim);
        let a = lsa_run(&inst, &s, 64, &theta0, run_seed).unwrap();
        let b = lsa_run(&inst, &s, 64, &theta0, run_seed).unwrap();
        prop_assert_eq!(a.iterates, b.iterates);
        prop_assert_eq!(a.average, b.average);
    }

    #[test]
    fn weight_collapse_is_exact_for_any_instance(
        dim in 1usize..4,
        instance_seed in 0u64..50,
        c0 in 0.05f64..0.3,
        k0 in 1u64..16,
    ) {
        let inst = make_random_hurwitz(dim, instance_seed, (0.5, 1.5), 0.5).unwrap();
        let s = StepSchedule::new(c0, 0.75, k0).unwrap();
        let traj = lsa_run(&inst, &s, 64, &DVector::zeros(dim), 3).unwrap();
        let ens = bootstrap_run(&traj, 2, WeightScheme::Constant, 9).unwrap();
        for avg in &ens.averages {
            prop_assert_eq!(avg, &traj.average);
        }
    }

    #[test]
    fn step_size_check_monotone_in_k0(
        instance_seed in 0u64..20,
        k0_lo in 1u64..1_000_000,
        bump in 1u64..1_000_000,
    ) {
        let inst = make_random_hurwitz(2, instance_seed, (0.5, 1.5), 0.4).unwrap();
        let consts = stability_constants(inst.abar(), None, inst.bound_a()).unwrap();
        let c0 = (consts.alpha_inf * 0.9).min(0.5);
        let lo = StepSchedule::new(c0, 0.7, k0_lo).unwrap();
        let hi = StepSchedule::new(c0, 0.7, k0_lo + bump).unwrap();
        if check_step_size(&lo, &consts, 2.0).passed {
            prop_assert!(check_step_size(&hi, &consts, 2.0).passed);
        }
    }

    #[test]
    fn quantile_radii_nest_across_levels(
        lo_level in 0.5f64..0.85,
        gap in 0.01f64..0.14,
        seed in 0u64..30,
    ) {
        let inst = make_random_hurwitz(2, 5, (0.5, 1.5), 0.5).unwrap();
        let s = StepSchedule::new(0.2, 0.7, 4).unwrap();
        let traj = lsa_run(&inst, &s, 64, &DVector::zeros(2), seed).unwrap();
        let ens = bootstrap_run(&traj, 64, WeightScheme::TwoPoint, seed).unwrap();
        let low = confidence_sets(&ens, lo_level, None).unwrap();
        let high = confidence_sets(&ens, lo_level + gap, None).unwrap();
        prop_assert!(low.sup_radius <= high.sup_radius);
        prop_assert!(low.ellipsoid_radius <= high.ellipsoid_radius);
        for (a, b) in low.intervals.iter().zip(&high.intervals) {
            prop_assert!(b.0 <= a.0 && a.1 <= b.1);
        }
    }
}

proptest! {
    // Monte-Carlo moment checks are expensive; a few cases suffice.
    #![proptest_config(ProptestConfig::with_cases(5))]

    #[test]
    fn atom_mixture_moments_match_monte_carlo(
        dim in 1usize..4,
        instance_seed in 0u64..1000,
        noise_scale in 0.2f64..1.0,
    ) {
        let inst = make_random_hurwitz(dim, instance_seed, (0.5, 1.5), noise_scale).unwrap();
        let n = 100_000usize;
        let mut sampler = inst.sampler();
        let mut mean_a = DMatrix::<f64>::zeros(dim, dim);
        let mut mean_b = DVector::<f64>::zeros(dim);
        let mut mean_ee = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..n {
            let (a, b) = sampler.next_observation();
            let eps = noise_at_solution(&a, &b, &inst).unwrap();
            mean_ee.ger(1.0, &eps, &eps, 1.0);
            mean_a += a;
            mean_b += b;
        }
        mean_a /= n as f64;
        mean_b /= n as f64;
        mean_ee /= n as f64;
        // Atom spread bounds: entries of A deviate by at most noise_scale,
        // b likewise; eps eps^T entries by noise_sup^2.
        let tol_a = 5.0 * noise_scale / (n as f64).sqrt();
        let tol_e = 5.0 * inst.noise_sup().powi(2) / (n as f64).sqrt();
        for i in 0..dim {
            prop_assert!((mean_b[i] - inst.bbar()[i]).abs() <= tol_a);
            for j in 0..dim {
                prop_assert!((mean_a[(i, j)] - inst.abar()[(i, j)]).abs() <= tol_a);
                prop_assert!((mean_ee[(i, j)] - inst.sigma_eps()[(i, j)]).abs() <= tol_e);
            }
        }
    }
}
