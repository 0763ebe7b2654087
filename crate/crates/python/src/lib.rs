//! Python bindings for the scenario-tree BSDE laboratory.
//!
//! The module mirrors the Rust surface at the granularity a notebook wants:
//! covariance kernels with their dual geometry, scenario trees, martingale
//! representation, the BSDE solvers, the gamma certificate and the
//! config-driven studies.

// The pymethods macro expands error paths through `.into()` on values that
// are already PyErr, which trips this lint.
#![allow(clippy::useless_conversion)]

use bsdelab::bsde::{compute_gamma as core_gamma, picard_solve, solve_bsde, DriverSpec};
use bsdelab::error::Error;
use bsdelab::frame::gram_schmidt_frame;
use bsdelab::harness::families::{build_driver, build_kernel};
use bsdelab::harness::{families_text, run_study, ExperimentConfig, FamilyConfig};
use bsdelab::kernel::CovarianceKernel;
use bsdelab::measure::{FiniteMeasure, Maturity};
use bsdelab::stochastic::{martingale_path, represent};
use bsdelab::tree::{BranchingDesign, Clock, ScenarioTree, DEFAULT_NODE_CAP};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig { .. }
        | Error::BetaOutOfRange(_)
        | Error::InvalidMaturity(_)
        | Error::DuplicatePoints(_)
        | Error::SupportOutsideBase(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn maturities(values: &[f64]) -> PyResult<Vec<Maturity>> {
    values
        .iter()
        .map(|&v| Maturity::new(v).map_err(to_py_err))
        .collect()
}

fn measure_from_atoms(atoms: &[(f64, f64)]) -> PyResult<FiniteMeasure> {
    let parsed: Vec<(Maturity, f64)> = atoms
        .iter()
        .map(|&(x, c)| Maturity::new(x).map(|p| (p, c)).map_err(to_py_err))
        .collect::<PyResult<_>>()?;
    Ok(FiniteMeasure::from_atoms(parsed))
}

/// A finite-rank covariance kernel built from a family config document.
#[pyclass(name = "Kernel")]
struct PyKernel {
    inner: CovarianceKernel,
}

#[pymethods]
impl PyKernel {
    /// `family_json` is the same document as the harness `kernel` section,
    /// e.g. `{"family": "exp-distance", "scale": 0.8}`; anchored families
    /// default their anchors to `anchor_points`.
    #[new]
    fn new(family_json: &str, anchor_points: Vec<f64>) -> PyResult<Self> {
        let cfg: FamilyConfig =
            serde_json::from_str(family_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let pts = maturities(&anchor_points)?;
        let inner = build_kernel(&cfg, &pts).map_err(to_py_err)?;
        Ok(PyKernel { inner })
    }

    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn evaluate(&self, step: usize, node: usize, x: f64, y: f64) -> PyResult<f64> {
        let x = Maturity::new(x).map_err(to_py_err)?;
        let y = Maturity::new(y).map_err(to_py_err)?;
        Ok(self.inner.evaluate(step, node, x, y))
    }

    fn gram(&self, step: usize, node: usize, points: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let pts = maturities(&points)?;
        let g = self.inner.gram(step, node, &pts).map_err(to_py_err)?;
        Ok((0..g.nrows())
            .map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect())
            .collect())
    }

    fn uprime_inner(
        &self,
        step: usize,
        node: usize,
        mu: Vec<(f64, f64)>,
        nu: Vec<(f64, f64)>,
    ) -> PyResult<f64> {
        let mu = measure_from_atoms(&mu)?;
        let nu = measure_from_atoms(&nu)?;
        Ok(self.inner.uprime_inner(step, node, &mu, &nu))
    }

    fn apply_q(
        &self,
        step: usize,
        node: usize,
        mu: Vec<(f64, f64)>,
        query: Vec<f64>,
    ) -> PyResult<Vec<f64>> {
        let mu = measure_from_atoms(&mu)?;
        let q = maturities(&query)?;
        Ok(self.inner.apply_q(step, node, &mu, &q))
    }

    /// Triangular frame coefficients per member (`None` for zero members).
    fn frame(
        &self,
        step: usize,
        node: usize,
        points: Vec<f64>,
    ) -> PyResult<Vec<Option<Vec<f64>>>> {
        let pts = maturities(&points)?;
        let frame = gram_schmidt_frame(&self.inner, step, node, &pts).map_err(to_py_err)?;
        Ok((1..=frame.len())
            .map(|m| frame.member_coeffs(m).map(|c| c.to_vec()))
            .collect())
    }

    fn frame_coefficients(
        &self,
        step: usize,
        node: usize,
        points: Vec<f64>,
        mu: Vec<(f64, f64)>,
    ) -> PyResult<Vec<f64>> {
        let pts = maturities(&points)?;
        let frame = gram_schmidt_frame(&self.inner, step, node, &pts).map_err(to_py_err)?;
        let mu = measure_from_atoms(&mu)?;
        frame.coefficients(&mu).map_err(to_py_err)
    }

    fn tail_norm_sq(
        &self,
        step: usize,
        node: usize,
        points: Vec<f64>,
        mu: Vec<(f64, f64)>,
        n: usize,
    ) -> PyResult<f64> {
        let pts = maturities(&points)?;
        let frame = gram_schmidt_frame(&self.inner, step, node, &pts).map_err(to_py_err)?;
        let mu = measure_from_atoms(&mu)?;
        frame.tail_norm_sq(&mu, n).map_err(to_py_err)
    }
}

/// An exhaustive scenario tree with exact-moment branch designs.
#[pyclass(name = "Tree")]
struct PyTree {
    inner: ScenarioTree,
}

#[pymethods]
impl PyTree {
    #[new]
    #[pyo3(signature = (increments, factors, design = "full-binary", cap = None))]
    fn new(
        increments: Vec<f64>,
        factors: usize,
        design: &str,
        cap: Option<u64>,
    ) -> PyResult<Self> {
        let clock = Clock::from_increments(increments).map_err(to_py_err)?;
        let design = match design {
            "full-binary" => BranchingDesign::FullBinary,
            "simplex" | "orthogonal-array" => BranchingDesign::Simplex,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown branching design `{other}`"
                )))
            }
        };
        let inner = ScenarioTree::build(clock, factors, design, cap.unwrap_or(DEFAULT_NODE_CAP))
            .map_err(to_py_err)?;
        Ok(PyTree { inner })
    }

    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn factors(&self) -> usize {
        self.inner.factors()
    }

    fn leaf_count(&self) -> usize {
        self.inner.leaf_count()
    }

    fn total_nodes(&self) -> usize {
        self.inner.total_nodes()
    }

    fn level_len(&self, level: usize) -> usize {
        self.inner.level_len(level)
    }

    fn cond_exp(&self, level: usize, values_next: Vec<f64>) -> Vec<f64> {
        self.inner.cond_exp(level, &values_next)
    }

    fn expectation(&self, level: usize, values: Vec<f64>) -> f64 {
        self.inner.expectation(level, &values)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().map_err(to_py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyTree {
            inner: ScenarioTree::from_json_str(text).map_err(to_py_err)?,
        })
    }

    /// Terminal values of the martingale `M^x`.
    fn martingale_terminal(&self, kernel: &PyKernel, x: f64) -> PyResult<Vec<f64>> {
        let x = Maturity::new(x).map_err(to_py_err)?;
        let path = martingale_path(&self.inner, &kernel.inner, x).map_err(to_py_err)?;
        Ok(path.terminal().to_vec())
    }

    /// Exact martingale representation of a terminal claim; returns
    /// `(mean, terminal residual values)`.
    fn represent(
        &self,
        kernel: &PyKernel,
        points: Vec<f64>,
        xi: Vec<f64>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let pts = maturities(&points)?;
        let rep = represent(&self.inner, &kernel.inner, &pts, &xi).map_err(to_py_err)?;
        Ok((rep.mean, rep.residual.terminal().to_vec()))
    }
}

/// Result of a BSDE solve exposed to Python.
#[pyclass(name = "BsdeResult")]
struct PyBsdeResult {
    #[pyo3(get)]
    y0: f64,
    #[pyo3(get)]
    max_one_step_residual: f64,
    #[pyo3(get)]
    y_terminal: Vec<f64>,
    #[pyo3(get)]
    n_terminal: Vec<f64>,
    #[pyo3(get)]
    iterations: Option<usize>,
    #[pyo3(get)]
    ratios: Option<Vec<f64>>,
}

fn driver_from_json(
    driver_json: &str,
    kernel: &CovarianceKernel,
    tree: &ScenarioTree,
) -> PyResult<DriverSpec> {
    let cfg: FamilyConfig =
        serde_json::from_str(driver_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    build_driver(&cfg, kernel, tree).map_err(to_py_err)
}

/// Backward solve of the BSDE with a named driver family.
#[pyfunction]
#[pyo3(name = "solve_bsde")]
fn solve_bsde_py(
    tree: &PyTree,
    kernel: &PyKernel,
    driver_json: &str,
    xi: Vec<f64>,
    points: Vec<f64>,
) -> PyResult<PyBsdeResult> {
    let pts = maturities(&points)?;
    let driver = driver_from_json(driver_json, &kernel.inner, &tree.inner)?;
    let sol = solve_bsde(&tree.inner, &kernel.inner, &driver, &xi, &pts).map_err(to_py_err)?;
    Ok(PyBsdeResult {
        y0: sol.initial_value(),
        max_one_step_residual: sol.diagnostics.max_one_step_residual,
        y_terminal: sol.y.terminal().to_vec(),
        n_terminal: sol.residual.terminal().to_vec(),
        iterations: None,
        ratios: None,
    })
}

/// Picard iteration of the same equation; `beta > 3` required.
#[pyfunction]
#[pyo3(name = "picard_solve")]
#[pyo3(signature = (tree, kernel, driver_json, xi, points, beta, max_iters = 200, tol = 1e-12))]
#[allow(clippy::too_many_arguments)]
fn picard_solve_py(
    tree: &PyTree,
    kernel: &PyKernel,
    driver_json: &str,
    xi: Vec<f64>,
    points: Vec<f64>,
    beta: f64,
    max_iters: usize,
    tol: f64,
) -> PyResult<PyBsdeResult> {
    let pts = maturities(&points)?;
    let driver = driver_from_json(driver_json, &kernel.inner, &tree.inner)?;
    let (sol, diag) = picard_solve(
        &tree.inner,
        &kernel.inner,
        &driver,
        &xi,
        &pts,
        beta,
        max_iters,
        tol,
    )
    .map_err(to_py_err)?;
    Ok(PyBsdeResult {
        y0: sol.initial_value(),
        max_one_step_residual: sol.diagnostics.max_one_step_residual,
        y_terminal: sol.y.terminal().to_vec(),
        n_terminal: sol.residual.terminal().to_vec(),
        iterations: Some(diag.iterations),
        ratios: Some(diag.ratios),
    })
}

/// Optimized approximation constant for `beta > 3`; returns
/// `(mu_sq, lambda_sq, gamma)`.
#[pyfunction]
fn compute_gamma(beta: f64) -> PyResult<(f64, f64, f64)> {
    let cert = core_gamma(beta).map_err(to_py_err)?;
    Ok((cert.mu_sq, cert.lambda_sq, cert.gamma))
}

/// Catalog of the built-in families, as stable plain text.
#[pyfunction]
fn families() -> String {
    families_text()
}

/// Parses and validates a study config; raises `ValueError` on violations.
#[pyfunction]
fn validate(config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(to_py_err)?;
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg.study.name().to_string())
}

/// Runs a study config, writes tables plus `summary.json` into `out_dir`,
/// and returns the summary JSON text.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, threads = None))]
fn run(config_json: &str, out_dir: &str, threads: Option<usize>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(to_py_err)?;
    let bundle = run_study(&cfg, None, threads).map_err(to_py_err)?;
    bundle
        .write_to(std::path::Path::new(out_dir))
        .map_err(to_py_err)?;
    bundle.summary_json().map_err(to_py_err)
}

#[pymodule]
fn bsdelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyBsdeResult>()?;
    m.add_function(wrap_pyfunction!(solve_bsde_py, m)?)?;
    m.add_function(wrap_pyfunction!(picard_solve_py, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(families, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
