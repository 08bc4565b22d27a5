//! Python bindings for `npag_core`.
//!
//! Configurations cross the boundary as JSON text in the same layout the
//! command line reads, so a config file can be loaded from either side.

use std::path::PathBuf;

use npag_core::config::RunConfig;
use npag_core::filtering::{self, Dose};
use npag_core::npag::{self, DiscreteDistribution, FitResult};
use npag_core::optimality::{self, OptimalityReport};
use npag_core::psi::PsiMatrix;
use npag_core::{dataset, ipm, simulate};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pynpag, NpagError, PyException, "Raised for every error reported by the core library.");

fn py_err(e: npag_core::NpagError) -> PyErr {
    NpagError::new_err(e.to_string())
}

/// Model, bounds, algorithm and simulation settings.
#[pyclass(name = "Config", module = "pynpag", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        RunConfig::from_json(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| NpagError::new_err(e.to_string()))
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.bounds.names().into_iter().map(String::from).collect()
    }

    #[getter]
    fn sim_seed(&self) -> u64 {
        self.inner.sim.seed
    }

    #[setter]
    fn set_sim_seed(&mut self, seed: u64) {
        self.inner.sim.seed = seed;
    }

    #[getter]
    fn rng_seed(&self) -> u64 {
        self.inner.npag.rng_seed
    }

    #[setter]
    fn set_rng_seed(&mut self, seed: u64) {
        self.inner.npag.rng_seed = seed;
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.sim.n_subjects
    }

    #[setter]
    fn set_n_subjects(&mut self, n: usize) {
        self.inner.sim.n_subjects = n;
    }

    fn __repr__(&self) -> String {
        format!("Config(parameters={:?})", self.inner.bounds.names())
    }
}

/// One individual's observation record.
#[pyclass(name = "Subject", module = "pynpag", from_py_object)]
#[derive(Clone)]
struct PySubject {
    inner: filtering::Subject,
}

#[pymethods]
impl PySubject {
    /// `observations[k]` holds one value per output, `None` where missing;
    /// `doses` are `(time, amount)` pairs.
    #[new]
    #[pyo3(signature = (id, times, observations, doses = Vec::new()))]
    fn new(id: String, times: Vec<f64>, observations: Vec<Vec<Option<f64>>>, doses: Vec<(f64, f64)>) -> PyResult<Self> {
        let doses = doses.into_iter().map(|(time, amount)| Dose { time, amount }).collect();
        filtering::Subject::new(id, times, observations, doses).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn scalar(id: String, times: Vec<f64>, values: Vec<f64>) -> PyResult<Self> {
        filtering::Subject::scalar(id, times, &values).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn observations(&self) -> Vec<Vec<Option<f64>>> {
        self.inner.observations.clone()
    }

    #[getter]
    fn doses(&self) -> Vec<(f64, f64)> {
        self.inner.doses.iter().map(|d| (d.time, d.amount)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Subject(id={:?}, observations={})", self.inner.id, self.inner.times.len())
    }
}

/// Finite mixing distribution: support points and their weights.
#[pyclass(name = "Distribution", module = "pynpag", skip_from_py_object)]
#[derive(Clone)]
struct PyDistribution {
    inner: DiscreteDistribution,
}

#[pymethods]
impl PyDistribution {
    #[new]
    fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        DiscreteDistribution::new(support, weights).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn support(&self) -> Vec<Vec<f64>> {
        self.inner.support.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Distribution(points={})", self.inner.len())
    }
}

/// Outcome of the optimality check on a lattice.
#[pyclass(name = "OptimalityReport", module = "pynpag", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyOptimalityReport {
    d_max: f64,
    argmax_theta: Vec<f64>,
    check_grid_size: usize,
    resolution: usize,
    support_d_values: Vec<f64>,
    threshold: f64,
    passed: bool,
}

impl From<&OptimalityReport> for PyOptimalityReport {
    fn from(r: &OptimalityReport) -> Self {
        Self {
            d_max: r.d_max,
            argmax_theta: r.argmax_theta.clone(),
            check_grid_size: r.check_grid_size,
            resolution: r.resolution,
            support_d_values: r.support_d_values.clone(),
            threshold: r.threshold,
            passed: r.pass,
        }
    }
}

#[pymethods]
impl PyOptimalityReport {
    fn __repr__(&self) -> String {
        format!("OptimalityReport(d_max={:.3e}, passed={})", self.d_max, self.passed)
    }
}

/// Fitted distribution with its convergence record.
#[pyclass(name = "FitResult", module = "pynpag")]
struct PyFitResult {
    inner: FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn distribution(&self) -> PyDistribution {
        PyDistribution { inner: self.inner.distribution.clone() }
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    /// `converged`, `cycle_limit` or `solver_limit`.
    #[getter]
    fn status(&self) -> String {
        match self.inner.status {
            npag::FitStatus::Converged => "converged",
            npag::FitStatus::CycleLimit => "cycle_limit",
            npag::FitStatus::SolverLimit => "solver_limit",
        }
        .to_string()
    }

    /// `(cycle, log_likelihood, eps, grid_size, support_size)` per cycle.
    #[getter]
    fn cycle_history(&self) -> Vec<(usize, f64, f64, usize, usize)> {
        self.inner
            .cycle_history
            .iter()
            .map(|c| (c.cycle, c.log_likelihood, c.eps, c.grid_size, c.support_size))
            .collect()
    }

    #[getter]
    fn optimality(&self) -> PyOptimalityReport {
        (&self.inner.optimality).into()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| NpagError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(status={}, log_likelihood={:.4}, points={})",
            self.status(),
            self.inner.log_likelihood,
            self.inner.distribution.len()
        )
    }
}

fn unwrap_subjects(subjects: &[PySubject]) -> Vec<filtering::Subject> {
    subjects.iter().map(|s| s.inner.clone()).collect()
}

/// Simulates the configured population. Returns the subjects and the
/// generating `(K, Vol)` pairs.
#[pyfunction]
fn simulate_population(config: &PyConfig) -> PyResult<(Vec<PySubject>, Vec<[f64; 2]>)> {
    let pop = simulate::simulate_population(&config.inner.sim, &config.inner.bounds).map_err(py_err)?;
    let subjects = pop.subjects.into_iter().map(|inner| PySubject { inner }).collect();
    Ok((subjects, pop.parameters))
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PySubject>> {
    let subjects = dataset::parse_dataset(&path).map_err(py_err)?;
    Ok(subjects.into_iter().map(|inner| PySubject { inner }).collect())
}

#[pyfunction]
fn write_dataset(path: PathBuf, subjects: Vec<PySubject>) -> PyResult<()> {
    dataset::write_dataset_file(&path, &unwrap_subjects(&subjects)).map_err(py_err)
}

/// Marginal log-likelihood of one subject at parameter vector `theta`.
#[pyfunction]
fn log_likelihood(config: &PyConfig, theta: Vec<f64>, subject: &PySubject) -> PyResult<f64> {
    let model = config.inner.population_model().map_err(py_err)?;
    let system = model.instantiate(&theta, &subject.inner).map_err(py_err)?;
    filtering::subject_log_likelihood(&system, &subject.inner).map_err(py_err)
}

/// Runs the adaptive grid fit. The interpreter lock is released meanwhile.
#[pyfunction]
fn fit(py: Python<'_>, config: &PyConfig, subjects: Vec<PySubject>) -> PyResult<PyFitResult> {
    let config = config.inner.clone();
    let subjects = unwrap_subjects(&subjects);
    let result = py.detach(move || {
        config.validate()?;
        let model = config.population_model()?;
        npag::run_npag(&model, &subjects, &config.npag)
    });
    result.map(|inner| PyFitResult { inner }).map_err(py_err)
}

/// Checks a distribution on a lattice over the bounds box.
#[pyfunction]
#[pyo3(signature = (config, distribution, subjects, resolution = None, tolerance = None))]
fn check(
    py: Python<'_>,
    config: &PyConfig,
    distribution: &PyDistribution,
    subjects: Vec<PySubject>,
    resolution: Option<usize>,
    tolerance: Option<f64>,
) -> PyResult<PyOptimalityReport> {
    let config = config.inner.clone();
    let dist = distribution.inner.clone();
    let subjects = unwrap_subjects(&subjects);
    let report = py.detach(move || {
        let model = config.population_model()?;
        let resolution = resolution
            .or(config.npag.check_resolution)
            .unwrap_or_else(|| optimality::default_resolution(config.bounds.dim()));
        let tolerance = tolerance.unwrap_or(config.npag.check_tolerance);
        optimality::verify_optimality(&dist, &model, &subjects, resolution, tolerance)
    });
    report.map(|r| (&r).into()).map_err(py_err)
}

/// Maximizes `Σ_i log Σ_k w_k exp(L[i][k])` over the simplex, where `L` holds
/// per-subject (rows) log-likelihoods at each candidate point (columns).
/// Returns the weights and the attained objective.
#[pyfunction]
#[pyo3(signature = (log_likelihoods, tol = 1e-10))]
fn solve_weights(log_likelihoods: Vec<Vec<f64>>, tol: f64) -> PyResult<(Vec<f64>, f64)> {
    let n = log_likelihoods.len();
    let k = log_likelihoods.first().map_or(0, Vec::len);
    if log_likelihoods.iter().any(|row| row.len() != k) {
        return Err(NpagError::new_err("every row needs the same number of columns"));
    }
    let columns: Vec<Vec<f64>> = (0..k).map(|j| log_likelihoods.iter().map(|row| row[j]).collect()).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("row{i}")).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let grid = (0..k).map(|j| vec![j as f64]).collect();
    let psi = PsiMatrix::from_log_columns(grid, &columns, &id_refs).map_err(py_err)?;
    let sol = ipm::solve_weights(&psi, tol).map_err(py_err)?;
    Ok((sol.weights, sol.log_likelihood))
}

#[pymodule]
fn pynpag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NpagError", m.py().get_type::<NpagError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySubject>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyOptimalityReport>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(simulate_population, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(solve_weights, m)?)?;
    Ok(())
}
