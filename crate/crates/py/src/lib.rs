//! Python bindings for the LSA inference laboratory.
//!
//! The module exposes the main types (instances, schedules, trajectories,
//! bootstrap ensembles) and the headline operations (averaged runs, the
//! online multiplier bootstrap, covariance algebra, rate experiments) as
//! plain Python objects; matrices come back as nested lists.

use lsa_core::bootstrap::{self, WeightScheme};
use lsa_core::covariance;
use lsa_core::engine;
use lsa_core::gaussapprox;
use lsa_core::model::{self, LsaInstance, MdpSpec};
use lsa_core::schedule::{self, StepSchedule};
use lsa_core::series::{DistanceSeries, Metric, ReferenceLaw, SeriesPoint};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(e: lsa_core::LsaError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn vector_list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn parse_weights(name: &str) -> PyResult<WeightScheme> {
    match name {
        "two_point" => Ok(WeightScheme::TwoPoint),
        "exp" | "exponential" => Ok(WeightScheme::Exponential),
        "poisson" | "poisson_shifted" => Ok(WeightScheme::PoissonShifted),
        other => Err(PyValueError::new_err(format!(
            "weights must be two_point | exp | poisson, got {other}"
        ))),
    }
}

/// Step-size schedule `alpha_k = c0 / (k + k0)^gamma`.
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: StepSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(c0: f64, gamma: f64, k0: u64) -> PyResult<Self> {
        Ok(Self {
            inner: StepSchedule::new(c0, gamma, k0).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn c0(&self) -> f64 {
        self.inner.c0()
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }
    #[getter]
    fn k0(&self) -> u64 {
        self.inner.k0()
    }

    fn step_size(&self, k: u64) -> f64 {
        self.inner.step_size(k)
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule(c0={}, gamma={}, k0={})",
            self.inner.c0(),
            self.inner.gamma(),
            self.inner.k0()
        )
    }
}

/// An observation sampler with exactly known ground truth.
#[pyclass(name = "Instance")]
struct PyInstance {
    inner: LsaInstance,
}

#[pymethods]
impl PyInstance {
    /// Random instance with a positive-stable mean matrix and bounded
    /// finite-mixture noise.
    #[staticmethod]
    #[pyo3(signature = (dim, seed, lo=0.5, hi=1.5, noise_scale=1.0))]
    fn random_hurwitz(dim: usize, seed: u64, lo: f64, hi: f64, noise_scale: f64) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_random_hurwitz(dim, seed, (lo, hi), noise_scale)
                .map_err(to_py_err)?,
        })
    }

    /// Scalar instance with standard Gaussian (unbounded) noise.
    #[staticmethod]
    fn lower_bound_1d(seed: u64) -> Self {
        Self {
            inner: model::make_gaussian_identity_1d(seed),
        }
    }

    /// TD(0) policy-evaluation instance under the generative model.
    /// Tables are nested lists: transitions[s][a][s'], rewards[s][a],
    /// policy[s][a], features[s][i].
    #[staticmethod]
    #[pyo3(signature = (transitions, rewards, policy, features, discount, seed))]
    fn td_generative(
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        policy: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        discount: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let n_states = transitions.len();
        let n_actions = transitions.first().map(|a| a.len()).unwrap_or(0);
        let mdp = MdpSpec {
            n_states,
            n_actions,
            transition: transitions,
            reward: rewards,
            policy,
            discount,
            features,
        };
        Ok(Self {
            inner: model::make_td_generative(&mdp, seed).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    #[getter]
    fn theta_star(&self) -> Vec<f64> {
        vector_list(self.inner.theta_star())
    }
    #[getter]
    fn abar(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.abar())
    }
    #[getter]
    fn sigma_eps(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.sigma_eps())
    }
    #[getter]
    fn bound_a(&self) -> f64 {
        self.inner.bound_a()
    }
    #[getter]
    fn noise_sup(&self) -> f64 {
        self.inner.noise_sup()
    }
    #[getter]
    fn unbounded_noise(&self) -> bool {
        self.inner.unbounded_noise()
    }

    fn __repr__(&self) -> String {
        format!("Instance(dim={})", self.inner.dim())
    }
}

/// A recorded averaged run.
#[pyclass(name = "Trajectory")]
struct PyTrajectory {
    inner: engine::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn n(&self) -> u64 {
        self.inner.n
    }
    #[getter]
    fn average(&self) -> Vec<f64> {
        vector_list(&self.inner.average)
    }
    #[getter]
    fn last(&self) -> Vec<f64> {
        vector_list(self.inner.iterates.last().unwrap())
    }

    fn iterates(&self) -> Vec<Vec<f64>> {
        self.inner.iterates.iter().map(vector_list).collect()
    }

    /// Distance of the averaged estimate from the target.
    fn error_norm(&self) -> PyResult<f64> {
        let star = self
            .inner
            .theta_star
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("trajectory has no target"))?;
        Ok((&self.inner.average - star).norm())
    }
}

/// M perturbed averaged estimates sharing one observation stream.
#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    inner: bootstrap::BootstrapEnsemble,
    theta_star: DVector<f64>,
}

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }
    #[getter]
    fn base_average(&self) -> Vec<f64> {
        vector_list(&self.inner.base_average)
    }

    fn averages(&self) -> Vec<Vec<f64>> {
        self.inner.averages.iter().map(vector_list).collect()
    }

    /// Confidence sets at the given level; `check_target` adds membership
    /// flags for the instance's target.
    #[pyo3(signature = (level, check_target=true))]
    fn confidence<'py>(
        &self,
        py: Python<'py>,
        level: f64,
        check_target: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let target = check_target.then_some(&self.theta_star);
        let report = bootstrap::confidence_sets(&self.inner, level, target).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("level", report.level)?;
        out.set_item("intervals", &report.intervals)?;
        out.set_item("sup_radius", report.sup_radius)?;
        out.set_item("ellipsoid_radius", report.ellipsoid_radius)?;
        out.set_item("degenerate", report.degenerate)?;
        out.set_item("contains_target", report.contains_target)?;
        Ok(out)
    }
}

/// Run the averaged recursion, recording the full trajectory.
#[pyfunction]
#[pyo3(signature = (instance, schedule, n, seed, theta0=None))]
fn lsa_run(
    instance: &PyInstance,
    schedule: &PySchedule,
    n: u64,
    seed: u64,
    theta0: Option<Vec<f64>>,
) -> PyResult<PyTrajectory> {
    let start = match theta0 {
        Some(v) => DVector::from_row_slice(&v),
        None => DVector::zeros(instance.inner.dim()),
    };
    let trajectory =
        engine::lsa_run(&instance.inner, &schedule.inner, n, &start, seed).map_err(to_py_err)?;
    Ok(PyTrajectory { inner: trajectory })
}

/// One-pass online bootstrap: the base state plus `m` perturbed replicates.
#[pyfunction]
#[pyo3(signature = (instance, schedule, n, m, data_seed, weight_seed, weights="two_point", theta0=None))]
#[allow(clippy::too_many_arguments)]
fn bootstrap_run(
    instance: &PyInstance,
    schedule: &PySchedule,
    n: u64,
    m: usize,
    data_seed: u64,
    weight_seed: u64,
    weights: &str,
    theta0: Option<Vec<f64>>,
) -> PyResult<PyEnsemble> {
    let start = match theta0 {
        Some(v) => DVector::from_row_slice(&v),
        None => DVector::zeros(instance.inner.dim()),
    };
    let ensemble = bootstrap::bootstrap_run_streaming(
        &instance.inner,
        &schedule.inner,
        n,
        &start,
        m,
        parse_weights(weights)?,
        data_seed,
        weight_seed,
    )
    .map_err(to_py_err)?;
    Ok(PyEnsemble {
        inner: ensemble,
        theta_star: instance.inner.theta_star().clone(),
    })
}

/// Finite-horizon covariance of the scaled average.
#[pyfunction]
fn sigma_n(instance: &PyInstance, schedule: &PySchedule, n: u64) -> Vec<Vec<f64>> {
    matrix_rows(&covariance::sigma_n(
        instance.inner.abar(),
        instance.inner.sigma_eps(),
        &schedule.inner,
        n,
    ))
}

/// Asymptotic (CLT) covariance.
#[pyfunction]
fn sigma_inf(instance: &PyInstance) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix_rows(
        &covariance::sigma_inf(instance.inner.abar(), instance.inner.sigma_eps())
            .map_err(to_py_err)?,
    ))
}

/// `(n, |Sigma_n - Sigma_inf|)` pairs over a horizon grid.
#[pyfunction]
fn covariance_gap(
    instance: &PyInstance,
    schedule: &PySchedule,
    n_grid: Vec<u64>,
) -> PyResult<Vec<(u64, f64)>> {
    let series = covariance::covariance_gap_series(
        instance.inner.abar(),
        instance.inner.sigma_eps(),
        &schedule.inner,
        &n_grid,
    )
    .map_err(to_py_err)?;
    Ok(series.points.iter().map(|p| (p.n, p.distance)).collect())
}

/// Exact Kolmogorov distance between `N(0, sigma^2)` and `N(0, 1)`.
#[pyfunction]
fn kolmogorov_1d(sigma: f64) -> f64 {
    gaussapprox::kolmogorov_normal_vs_normal_1d(sigma)
}

/// Standard deviation of the scaled average for the scalar unit problem.
#[pyfunction]
fn lower_bound_sigma(schedule: &PySchedule, n: u64) -> f64 {
    gaussapprox::lower_bound_sigma_n_1d(&schedule.inner, n)
}

/// Log-log rate fit of `(n, distance)` points.
#[pyfunction]
fn rate_fit<'py>(py: Python<'py>, ns: Vec<u64>, distances: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    if ns.len() != distances.len() {
        return Err(PyValueError::new_err("ns and distances differ in length"));
    }
    let points: Vec<SeriesPoint> = ns
        .iter()
        .zip(&distances)
        .map(|(&n, &d)| SeriesPoint {
            n,
            distance: d,
            std_err: 0.0,
        })
        .collect();
    let series = DistanceSeries {
        metric: Metric::HalfspaceSup,
        reference: ReferenceLaw::Empirical,
        points,
    };
    let fit = gaussapprox::rate_fit(&series).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("slope", fit.slope)?;
    out.set_item("intercept", fit.intercept)?;
    out.set_item("r_squared", fit.r_squared)?;
    out.set_item("slope_stderr", fit.slope_stderr)?;
    Ok(out)
}

/// Empirical coverage of the bootstrap confidence sets.
#[pyfunction]
#[pyo3(signature = (instance, schedule, n, m, r, level, seed, weights="two_point"))]
#[allow(clippy::too_many_arguments)]
fn coverage<'py>(
    py: Python<'py>,
    instance: &PyInstance,
    schedule: &PySchedule,
    n: u64,
    m: usize,
    r: usize,
    level: f64,
    seed: u64,
    weights: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let summary = bootstrap::coverage_experiment(
        &instance.inner,
        &schedule.inner,
        n,
        m,
        r,
        level,
        parse_weights(weights)?,
        seed,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item(
        "per_coordinate",
        summary
            .per_coordinate
            .iter()
            .map(|e| e.coverage)
            .collect::<Vec<f64>>(),
    )?;
    out.set_item("rectangle", summary.rectangle.coverage)?;
    out.set_item("sup_norm", summary.sup_norm.coverage)?;
    out.set_item("ellipsoid", summary.ellipsoid.coverage)?;
    out.set_item("replications", summary.replications)?;
    out.set_item("divergent_runs", summary.divergent_runs)?;
    Ok(out)
}

/// Lyapunov-derived stability constants for the instance's mean matrix.
#[pyfunction]
fn stability_constants<'py>(
    py: Python<'py>,
    instance: &PyInstance,
) -> PyResult<Bound<'py, PyDict>> {
    let consts =
        schedule::stability_constants(instance.inner.abar(), None, instance.inner.bound_a())
            .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("a", consts.a)?;
    out.set_item("alpha_inf", consts.alpha_inf)?;
    out.set_item("kappa_q", consts.kappa_q)?;
    out.set_item("b_q", consts.b_q)?;
    out.set_item("q", matrix_rows(&consts.q))?;
    Ok(out)
}

#[pymodule]
fn lsa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(lsa_run, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_run, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_n, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_inf, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_gap, m)?)?;
    m.add_function(wrap_pyfunction!(kolmogorov_1d, m)?)?;
    m.add_function(wrap_pyfunction!(lower_bound_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(stability_constants, m)?)?;
    Ok(())
}
