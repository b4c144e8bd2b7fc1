//! Subcommand pipelines: build the instance, run the module, persist outputs.

use std::fs;
use std::path::Path;

use lsa_core::bootstrap::{bootstrap_run_streaming, confidence_sets, coverage_experiment};
use lsa_core::covariance::{self, covariance_report};
use lsa_core::engine;
use lsa_core::gaussapprox::{
    bootstrap_validity_experiment, clt_rate_experiment, predicted_clt_exponent,
    predicted_validity_exponent, rate_fit, RateFit,
};
use lsa_core::model::LsaInstance;
use lsa_core::schedule::{
    check_bootstrap_assumptions, check_step_size, stability_constants, weight_norm_bound,
    AssumptionReport, StabilityConstants, StepSchedule,
};
use lsa_core::series::DistanceSeries;
use lsa_core::LsaError;
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, InstanceSpec};
use crate::manifest::{AssumptionSummary, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("assertion failed: {0}")]
    AssertFailed(String),
    #[error("{0}")]
    Other(String),
}

impl From<LsaError> for CommandError {
    fn from(e: LsaError) -> Self {
        match e {
            LsaError::Divergence { .. } => CommandError::Divergence(e.to_string()),
            LsaError::InvalidParameter(_) => CommandError::Config(e.to_string()),
            other => CommandError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Other(format!("i/o error: {e}"))
    }
}

type CmdResult<T> = Result<T, CommandError>;

pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_bytes: Vec<u8>,
    pub seed: u64,
    pub seed_from_env: bool,
    pub assert_mode: bool,
    pub workers: usize,
    pub started_unix: u64,
}

impl RunContext {
    fn instance(&self) -> CmdResult<LsaInstance> {
        self.config
            .instance_spec
            .build()
            .map_err(|e| CommandError::Config(e.to_string()))
    }

    fn theta0(&self, dim: usize) -> CmdResult<Option<DVector<f64>>> {
        match &self.config.theta0 {
            None => Ok(None),
            Some(values) => {
                if values.len() != dim {
                    return Err(CommandError::Config(format!(
                        "\"theta0\" has length {}, expected {dim}",
                        values.len()
                    )));
                }
                Ok(Some(DVector::from_row_slice(values)))
            }
        }
    }

    fn need_n(&self) -> CmdResult<u64> {
        self.config
            .n
            .ok_or_else(|| CommandError::Config("this subcommand requires \"n\"".into()))
    }

    fn need_grid(&self) -> CmdResult<&[u64]> {
        self.config
            .n_grid
            .as_deref()
            .ok_or_else(|| CommandError::Config("this subcommand requires \"n_grid\"".into()))
    }

    fn replications(&self, what: &str) -> CmdResult<usize> {
        self.config
            .replications
            .ok_or_else(|| CommandError::Config(format!("{what} requires \"R\"")))
    }

    fn assumption_summary(&self, instance: &LsaInstance) -> Option<AssumptionSummary> {
        let consts = stability_constants(instance.abar(), None, instance.bound_a()).ok()?;
        let report = check_step_size(&self.config.schedule, &consts, 2.0);
        Some(AssumptionSummary {
            passed: report.passed,
            failing: report.failing().iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Write the manifest plus all result files. The manifest goes first.
    fn persist(
        &self,
        subcommand: &str,
        instance: &LsaInstance,
        files: &[(&str, String)],
        binary_files: &[(&str, Vec<u8>)],
    ) -> CmdResult<()> {
        let out_dir = &self.config.out_dir;
        fs::create_dir_all(out_dir)?;
        let manifest = RunManifest::new(
            &self.config_bytes,
            subcommand,
            self.started_unix,
            self.seed,
            self.seed_from_env,
            self.workers,
            self.assumption_summary(instance),
        );
        write_json(out_dir, "manifest.json", &manifest)?;
        for (name, content) in files {
            fs::write(out_dir.join(name), content)?;
        }
        for (name, content) in binary_files {
            fs::write(out_dir.join(name), content)?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CommandError::Other(format!("serialization: {e}")))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn json_string<T: Serialize>(value: &T) -> CmdResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CommandError::Other(format!("serialization: {e}")))
}

fn rate_fit_json(fit: &RateFit, predicted: f64) -> serde_json::Value {
    json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "slope_stderr": fit.slope_stderr,
        "predicted_exponent": predicted,
    })
}

fn vector_json(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn simulate(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let n = ctx.need_n()?;
    let theta0 = ctx
        .theta0(instance.dim())?
        .unwrap_or_else(|| DVector::zeros(instance.dim()));
    let trajectory = engine::lsa_run(&instance, &ctx.config.schedule, n, &theta0, ctx.seed)?;
    let mut binary = Vec::new();
    trajectory.write_binary(&mut binary).map_err(CommandError::from)?;
    let err_norm = (&trajectory.average - instance.theta_star()).norm();
    let result = json!({
        "n": n,
        "dim": instance.dim(),
        "average": vector_json(&trajectory.average),
        "theta_star": vector_json(instance.theta_star()),
        "error_norm": err_norm,
        "last_iterate": vector_json(trajectory.iterates.last().unwrap()),
    });
    ctx.persist(
        "simulate",
        &instance,
        &[
            ("trajectory.csv", trajectory.to_csv()),
            ("result.json", json_string(&result)?),
        ],
        &[("trajectory.bin", binary)],
    )?;
    println!(
        "simulate: n = {n}, |average - target| = {err_norm:.6e}, outputs in {}",
        ctx.config.out_dir.display()
    );
    Ok(())
}

pub fn bootstrap(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let n = ctx.need_n()?;
    let theta0 = ctx
        .theta0(instance.dim())?
        .unwrap_or_else(|| DVector::zeros(instance.dim()));
    let ensemble = bootstrap_run_streaming(
        &instance,
        &ctx.config.schedule,
        n,
        &theta0,
        ctx.config.m_replicates,
        ctx.config.weights,
        ctx.seed,
        lsa_core::rngutil::mix(ctx.seed, 0xB00),
    )?;
    let report = confidence_sets(&ensemble, ctx.config.level, Some(instance.theta_star()))?;

    let mut csv = String::from("replicate");
    for i in 1..=instance.dim() {
        csv.push_str(&format!(",avg_{i}"));
    }
    csv.push('\n');
    for (l, avg) in ensemble.averages.iter().enumerate() {
        csv.push_str(&l.to_string());
        for v in avg.iter() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }

    ctx.persist(
        "bootstrap",
        &instance,
        &[
            ("ensemble.csv", csv),
            ("confidence.json", json_string(&report)?),
        ],
        &[],
    )?;
    println!(
        "bootstrap: M = {}, sup radius {:.6e}, contains target: {:?}",
        ensemble.m, report.sup_radius, report.contains_target
    );
    Ok(())
}

pub fn coverage(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let n = ctx.need_n()?;
    let r = ctx.replications("coverage")?;
    let summary = coverage_experiment(
        &instance,
        &ctx.config.schedule,
        n,
        ctx.config.m_replicates,
        r,
        ctx.config.level,
        ctx.config.weights,
        ctx.seed,
    )?;
    let mut csv = String::from("shape,coverage,std_err\n");
    for (i, e) in summary.per_coordinate.iter().enumerate() {
        csv.push_str(&format!("coordinate_{},{},{}\n", i + 1, e.coverage, e.std_err));
    }
    csv.push_str(&format!(
        "rectangle,{},{}\n",
        summary.rectangle.coverage, summary.rectangle.std_err
    ));
    csv.push_str(&format!(
        "sup_norm,{},{}\n",
        summary.sup_norm.coverage, summary.sup_norm.std_err
    ));
    csv.push_str(&format!(
        "ellipsoid,{},{}\n",
        summary.ellipsoid.coverage, summary.ellipsoid.std_err
    ));
    ctx.persist(
        "coverage",
        &instance,
        &[
            ("coverage.csv", csv),
            ("coverage.json", json_string(&summary)?),
        ],
        &[],
    )?;
    let coords: Vec<String> = summary
        .per_coordinate
        .iter()
        .map(|e| format!("{:.3}", e.coverage))
        .collect();
    println!(
        "coverage: level {}, per-coordinate [{}], sup {:.3}, ellipsoid {:.3} over R = {}",
        summary.level,
        coords.join(", "),
        summary.sup_norm.coverage,
        summary.ellipsoid.coverage,
        summary.replications
    );
    if ctx.assert_mode {
        let (lo, hi) = ctx.config.asserts.coverage_band;
        for (i, e) in summary.per_coordinate.iter().enumerate() {
            if !(lo..=hi).contains(&e.coverage) {
                return Err(CommandError::AssertFailed(format!(
                    "coordinate {} coverage {:.4} outside [{lo}, {hi}]",
                    i + 1,
                    e.coverage
                )));
            }
        }
        println!("assert: per-coordinate coverage within [{lo}, {hi}]");
    }
    Ok(())
}

pub fn covariance_gap(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let grid = ctx.need_grid()?;
    let series = covariance::covariance_gap_series(
        instance.abar(),
        instance.sigma_eps(),
        &ctx.config.schedule,
        grid,
    )?;
    let fit = rate_fit(&series)?;
    let predicted = ctx.config.schedule.gamma() - 1.0;
    let report = covariance_report(
        instance.abar(),
        instance.sigma_eps(),
        &ctx.config.schedule,
        *grid.last().unwrap(),
    )?;

    // CSV per grid point: n, gap, then the finite-horizon matrix row-major.
    let d = instance.dim();
    let mut csv = String::from("n,gap");
    for i in 1..=d {
        for j in 1..=d {
            csv.push_str(&format!(",sigma_n_{i}{j}"));
        }
    }
    csv.push('\n');
    for p in &series.points {
        let s_n = covariance::sigma_n(
            instance.abar(),
            instance.sigma_eps(),
            &ctx.config.schedule,
            p.n,
        );
        csv.push_str(&format!("{},{}", p.n, p.distance));
        for i in 0..d {
            for j in 0..d {
                csv.push_str(&format!(",{}", s_n[(i, j)]));
            }
        }
        csv.push('\n');
    }

    ctx.persist(
        "covariance-gap",
        &instance,
        &[
            ("gap.csv", csv),
            ("covariance.json", json_string(&report)?),
            (
                "rate_fit.json",
                json_string(&rate_fit_json(&fit, predicted))?,
            ),
        ],
        &[],
    )?;
    println!(
        "covariance-gap: fitted slope {:+.4}, predicted {predicted:+.4}, r2 {:.4}",
        fit.slope, fit.r_squared
    );
    if ctx.assert_mode {
        let tol = ctx.config.asserts.gap_tol;
        if (fit.slope - predicted).abs() > tol {
            return Err(CommandError::AssertFailed(format!(
                "gap slope {:.4} deviates from {predicted:.4} by more than {tol}",
                fit.slope
            )));
        }
        println!("assert: |slope - ({predicted:.4})| <= {tol}");
    }
    Ok(())
}

fn print_series_table(series: &DistanceSeries, fit: &RateFit, predicted: f64) {
    println!("{:>10}  {:>12}  {:>10}", "n", "distance", "std_err");
    for p in &series.points {
        println!("{:>10}  {:>12.6}  {:>10.6}", p.n, p.distance, p.std_err);
    }
    println!(
        "fitted slope {:+.4} (stderr {:.4}), predicted exponent {predicted:+.4}, r2 {:.4}",
        fit.slope, fit.slope_stderr, fit.r_squared
    );
}

pub fn clt_rates(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let grid = ctx.need_grid()?;
    let r = ctx.replications("clt-rates")?;
    let theta0 = ctx.theta0(instance.dim())?;
    let series = clt_rate_experiment(
        &instance,
        &ctx.config.schedule,
        grid,
        r,
        ctx.config.k_directions,
        ctx.seed,
        ctx.config.reference,
        theta0.as_ref(),
    )?;
    let fit = rate_fit(&series)?;
    let predicted = predicted_clt_exponent(ctx.config.schedule.gamma(), ctx.config.reference);
    print_series_table(&series, &fit, predicted);
    ctx.persist(
        "clt-rates",
        &instance,
        &[
            ("distances.csv", series.to_csv()),
            (
                "rate_fit.json",
                json_string(&rate_fit_json(&fit, predicted))?,
            ),
            ("series.json", json_string(&series)?),
        ],
        &[],
    )?;
    if ctx.assert_mode {
        let (lo, hi) = ctx.config.asserts.slope_band;
        if !(lo..=hi).contains(&fit.slope) {
            return Err(CommandError::AssertFailed(format!(
                "fitted slope {:.4} outside [{lo}, {hi}]",
                fit.slope
            )));
        }
        println!("assert: slope within [{lo}, {hi}]");
    }
    Ok(())
}

pub fn boot_validity(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let grid = ctx.need_grid()?;
    let theta0 = ctx.theta0(instance.dim())?;
    let result = bootstrap_validity_experiment(
        &instance,
        &ctx.config.schedule,
        grid,
        ctx.config.m_replicates,
        ctx.config.r_outer,
        ctx.config.r_real,
        ctx.config.k_directions,
        ctx.seed,
        ctx.config.weights,
        theta0.as_ref(),
    )?;
    let fit = rate_fit(&result.median)?;
    let predicted = predicted_validity_exponent(ctx.config.schedule.gamma());
    print_series_table(&result.median, &fit, predicted);
    ctx.persist(
        "boot-validity",
        &instance,
        &[
            ("validity_median.csv", result.median.to_csv()),
            ("validity_p90.csv", result.p90.to_csv()),
            (
                "rate_fit.json",
                json_string(&rate_fit_json(&fit, predicted))?,
            ),
        ],
        &[],
    )?;
    if ctx.assert_mode {
        let max = ctx.config.asserts.slope_max;
        if fit.slope > max {
            return Err(CommandError::AssertFailed(format!(
                "fitted slope {:.4} above {max}",
                fit.slope
            )));
        }
        println!("assert: slope <= {max}");
    }
    Ok(())
}

#[derive(Serialize)]
struct AssumptionOutput {
    step_size: AssumptionReport,
    bootstrap: AssumptionReport,
    constants: ConstantsOutput,
}

#[derive(Serialize)]
struct ConstantsOutput {
    a: f64,
    alpha_inf: f64,
    kappa_q: f64,
    b_q: f64,
    weight_norm_bound: f64,
    lambda_min_sigma_inf: f64,
    gap_constant_surrogate: f64,
}

pub fn check_assumptions(ctx: &RunContext) -> CmdResult<()> {
    let instance = ctx.instance()?;
    let n = ctx.need_n()?;
    let consts: StabilityConstants =
        stability_constants(instance.abar(), None, instance.bound_a())?;
    let schedule: &StepSchedule = &ctx.config.schedule;
    let step_report = check_step_size(schedule, &consts, ctx.config.moment_order);

    let sigma_inf = covariance::sigma_inf(instance.abar(), instance.sigma_eps())?;
    let lambda_min = lsa_core::linalg::sym_lambda_min(&sigma_inf);
    let c_bound = weight_norm_bound(&consts, schedule);
    let gap_constant = covariance::gap_constant_surrogate(
        instance.abar(),
        instance.sigma_eps(),
        schedule,
        n,
    )?;
    let boot_report = check_bootstrap_assumptions(
        schedule,
        &consts,
        n,
        instance.dim(),
        instance.noise_sup(),
        lambda_min,
        c_bound,
        Some(gap_constant),
    );

    if instance.unbounded_noise() {
        println!("note: instance has unbounded noise; boundedness-based conditions are vacuous");
    }
    println!("step-size conditions (p = {}):", ctx.config.moment_order);
    println!("{step_report}");
    println!();
    println!("bootstrap conditions at n = {n}:");
    println!("{boot_report}");

    let output = AssumptionOutput {
        step_size: step_report,
        bootstrap: boot_report,
        constants: ConstantsOutput {
            a: consts.a,
            alpha_inf: consts.alpha_inf,
            kappa_q: consts.kappa_q,
            b_q: consts.b_q,
            weight_norm_bound: c_bound,
            lambda_min_sigma_inf: lambda_min,
            gap_constant_surrogate: gap_constant,
        },
    };
    ctx.persist(
        "check-assumptions",
        &instance,
        &[("report.json", json_string(&output)?)],
        &[],
    )?;
    Ok(())
}

pub fn td_demo(ctx: &RunContext) -> CmdResult<()> {
    if !ctx.config.instance_spec.is_td() {
        return Err(CommandError::Config(
            "td-demo requires instance.kind = \"td_generative\"".into(),
        ));
    }
    let mdp = match &ctx.config.instance_spec {
        InstanceSpec::TdGenerative { mdp, .. } => mdp.clone(),
        _ => unreachable!(),
    };
    let instance = ctx.instance()?;
    let n = ctx.need_n()?;
    let theta0 = ctx
        .theta0(instance.dim())?
        .unwrap_or_else(|| DVector::zeros(instance.dim()));
    let trajectory = engine::lsa_run(&instance, &ctx.config.schedule, n, &theta0, ctx.seed)?;
    let values = mdp
        .policy_values()
        .map_err(|e| CommandError::Other(e.to_string()))?;

    // predicted state values under the fitted and target parameters
    let feature = |s: usize| DVector::from_row_slice(&mdp.features[s]);
    let mut csv = String::from("state,value_direct,value_target_fit,value_estimate\n");
    for s in 0..mdp.n_states {
        let phi = feature(s);
        csv.push_str(&format!(
            "{s},{},{},{}\n",
            values[s],
            phi.dot(instance.theta_star()),
            phi.dot(&trajectory.average)
        ));
    }
    let result = json!({
        "n": n,
        "theta_star": vector_json(instance.theta_star()),
        "theta_estimate": vector_json(&trajectory.average),
        "estimate_error_norm": (&trajectory.average - instance.theta_star()).norm(),
        "bellman_values": values.iter().copied().collect::<Vec<f64>>(),
    });
    ctx.persist(
        "td-demo",
        &instance,
        &[
            ("values.csv", csv),
            ("td_demo.json", json_string(&result)?),
        ],
        &[],
    )?;
    println!(
        "td-demo: |estimate - target| = {:.6e} after {n} transitions",
        (&trajectory.average - instance.theta_star()).norm()
    );
    Ok(())
}

pub fn run(subcommand: &str, ctx: &RunContext) -> CmdResult<()> {
    match subcommand {
        "simulate" => simulate(ctx),
        "bootstrap" => bootstrap(ctx),
        "coverage" => coverage(ctx),
        "covariance-gap" => covariance_gap(ctx),
        "clt-rates" => clt_rates(ctx),
        "boot-validity" => boot_validity(ctx),
        "check-assumptions" => check_assumptions(ctx),
        "td-demo" => td_demo(ctx),
        other => Err(CommandError::Config(format!("unknown subcommand {other}"))),
    }
}
