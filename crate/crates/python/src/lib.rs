//! Python bindings: model and basis queries, path simulation, scalar BSDE
//! solves, and the configuration-driven experiments of the `teugel` CLI.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use teugel_cli::{CliError, Command};
use teugel_core::bsde_solver::{solve_bsde, FnDriver, Shape, TerminalSpec};
use teugel_core::path_engine::empirical_bracket;
use teugel_core::{Atom, JumpMeasure, RegressionBasis, RngSpec, SimulationOptions, TimeGrid};

fn core_err(e: teugel_core::Error) -> PyErr {
    match CliError::from_core(e) {
        CliError::Config(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(frozen)]
struct LevyModel {
    inner: teugel_core::LevyModel,
}

#[pymethods]
impl LevyModel {
    /// `atoms` is a list of `(jump size, intensity)` pairs.
    #[new]
    #[pyo3(signature = (drift, sigma, atoms, brownian_dim = 1))]
    fn new(drift: f64, sigma: f64, atoms: Vec<(f64, f64)>, brownian_dim: usize) -> PyResult<Self> {
        let jumps = JumpMeasure::new(atoms.into_iter().map(|(x, nu)| Atom::new(x, nu)).collect());
        let inner = teugel_core::LevyModel::new(drift, sigma, jumps, brownian_dim)
            .validate()
            .map_err(core_err)?;
        Ok(Self { inner })
    }

    /// Unit Brownian part and jumps of size ±1 at rate 1/2 each.
    #[staticmethod]
    fn reference() -> Self {
        Self {
            inner: teugel_core::LevyModel::reference(),
        }
    }

    fn mu_moment(&self, k: usize) -> f64 {
        self.inner.mu_moment(k)
    }

    fn compensator_rate(&self, power: usize) -> f64 {
        self.inner.compensator_rate(power)
    }

    fn gram_matrix(&self, level: usize) -> Vec<Vec<f64>> {
        rows(&self.inner.gram_matrix(level))
    }

    /// Lower-triangular rows of the orthonormalization coefficients.
    fn teugel_coeffs(&self, level: usize) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.teugel_coeffs(level).map_err(core_err)?;
        Ok(rows(c.matrix()))
    }

    fn __repr__(&self) -> String {
        format!(
            "LevyModel(drift={}, sigma={}, atoms={})",
            self.inner.drift,
            self.inner.sigma,
            self.inner.jumps.atoms().len()
        )
    }
}

#[pyclass(frozen)]
struct PathBundle {
    inner: teugel_core::PathBundle,
}

#[pymethods]
impl PathBundle {
    #[staticmethod]
    #[pyo3(signature = (model, level, n_steps, n_paths, seed = 0, horizon = 1.0))]
    fn simulate(
        py: Python<'_>,
        model: &LevyModel,
        level: usize,
        n_steps: usize,
        n_paths: usize,
        seed: u64,
        horizon: f64,
    ) -> PyResult<Self> {
        let coeffs = model.inner.teugel_coeffs(level).map_err(core_err)?;
        let grid = TimeGrid::new(horizon, n_steps).map_err(core_err)?;
        let m = &model.inner;
        let inner = py
            .detach(|| {
                teugel_core::simulate_paths(
                    m,
                    &coeffs,
                    grid,
                    n_paths,
                    RngSpec::new(seed),
                    &SimulationOptions::default(),
                )
            })
            .map_err(core_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.n_paths()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level()
    }

    fn dw(&self, path: usize, step: usize) -> PyResult<Vec<f64>> {
        self.check(path, step)?;
        Ok(self.inner.dw(path, step).to_vec())
    }

    fn dh(&self, path: usize, step: usize) -> PyResult<Vec<f64>> {
        self.check(path, step)?;
        Ok(self.inner.dh(path, step).to_vec())
    }

    /// `H(T)` on every path, one row per path.
    fn terminal_h(&self) -> Vec<Vec<f64>> {
        self.inner.terminal_states().into_iter().map(|s| s.h).collect()
    }

    /// Largest z-score of the empirical `[H^i, H^j](T)` against `δ_ij T`.
    fn bracket_max_z(&self) -> f64 {
        empirical_bracket(&self.inner).max_z_score(self.inner.grid().horizon())
    }
}

impl PathBundle {
    fn check(&self, path: usize, step: usize) -> PyResult<()> {
        if path >= self.inner.n_paths() || step >= self.inner.n_steps() {
            return Err(PyValueError::new_err(format!(
                "(path, step) = ({path}, {step}) is outside {} paths × {} steps",
                self.inner.n_paths(),
                self.inner.n_steps()
            )));
        }
        Ok(())
    }
}

/// Solves the scalar BSDE with driver `f = beta·y` and terminal value
/// `c + w·W(T) + h·H(T) + l·L(T)`. Returns `y0` and the per-step means of
/// `q` and `z`.
#[pyfunction]
#[pyo3(signature = (bundle, constant, beta = 0.0, w = None, h = None, l = 0.0))]
fn solve_linear_bsde<'py>(
    py: Python<'py>,
    bundle: &PathBundle,
    constant: f64,
    beta: f64,
    w: Option<Vec<f64>>,
    h: Option<Vec<f64>>,
    l: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let b = &bundle.inner;
    let (d, k) = (b.brownian_dim(), b.level());
    let w = w.unwrap_or_else(|| vec![0.0; d]);
    let h = h.unwrap_or_else(|| vec![0.0; k]);
    if w.len() != d || h.len() != k {
        return Err(PyValueError::new_err(format!(
            "w needs {d} entries and h needs {k}"
        )));
    }
    let terminal = TerminalSpec::affine(
        vec![constant],
        w.into_iter().map(|x| vec![x]).collect(),
        h.into_iter().map(|x| vec![x]).collect(),
        vec![l],
    );
    let shape = Shape { n: 1, d, k, m: 0 };
    let driver = FnDriver::new(shape, move |_, p, out: &mut [f64]| out[0] = beta * p.y[0]);
    let sol = py
        .detach(|| solve_bsde(&driver, &terminal, b, &RegressionBasis::default(), None))
        .map_err(core_err)?;
    let out = PyDict::new(py);
    out.set_item("y0", sol.y0()[0])?;
    out.set_item("mean_q", (0..b.n_steps()).map(|n| sol.mean_q(n)).collect::<Vec<_>>())?;
    out.set_item("mean_z", (0..b.n_steps()).map(|n| sol.mean_z(n)).collect::<Vec<_>>())?;
    Ok(out)
}

/// Runs one CLI command on a TOML configuration string and writes its report
/// bundle. Returns `{"passed", "metrics", "checks", "files"}` where each
/// metric is a `(value, std_err or None)` pair.
#[pyfunction]
#[pyo3(signature = (command, config, overrides = Vec::new(), out = None, seed = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    command: &str,
    config: &str,
    overrides: Vec<String>,
    out: Option<std::path::PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let command = <Command as clap::ValueEnum>::from_str(command, true)
        .map_err(|_| PyValueError::new_err(format!("unknown command `{command}`")))?;
    let opts = teugel_cli::RunOptions { overrides, out, seed };
    let outcome = py
        .detach(|| teugel_cli::run_str(command, config, &opts))
        .map_err(|e| match e {
            CliError::Config(msg) => PyValueError::new_err(msg),
            other => PyRuntimeError::new_err(other.to_string()),
        })?;
    let report = &outcome.report;
    let metrics = PyDict::new(py);
    for (name, m) in report.metrics() {
        metrics.set_item(name, (m.value, m.std_err))?;
    }
    let checks: Vec<(String, String, bool)> = report
        .checks()
        .iter()
        .map(|c| (c.metric.clone(), c.requirement.clone(), c.passed))
        .collect();
    let result = PyDict::new(py);
    result.set_item("passed", report.passed())?;
    result.set_item("metrics", metrics)?;
    result.set_item("checks", checks)?;
    result.set_item("files", outcome.files)?;
    Ok(result)
}

#[pymodule]
fn teugel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LevyModel>()?;
    m.add_class::<PathBundle>()?;
    m.add_function(wrap_pyfunction!(solve_linear_bsde, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
