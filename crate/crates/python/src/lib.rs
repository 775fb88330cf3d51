//! Python bindings: problems, both solvers, oracle and diagnostics.
//!
//! Vectors cross the boundary as Python lists of floats; nested reports
//! come back as dicts.

use std::path::PathBuf;
use std::sync::Arc;

use fortet_core::fortet::{SystemResiduals, UniquenessOptions};
use fortet_core::sinkhorn::run_sinkhorn_traced;
use fortet_core::{
    build_coupling, build_grid, entropic_interpolation, kl_objective, load_problem, run_fortet, verify_uniqueness,
    Backend, DensityField, Error, FloorSchedule, FortetOptions, GaussianBridgeSpec, GridSpec, KernelOperator,
    MarginalPair, PotentialPair, QuadratureGrid, QuadratureRule, SinkhornOptions, TraceRow,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(fortet, FortetError, PyException, "Solver or configuration failure.");
create_exception!(fortet, NotConvergedError, FortetError, "Iteration cap reached.");

fn err(e: Error) -> PyErr {
    match e {
        Error::NotConverged { iterations, .. } => {
            NotConvergedError::new_err(format!("no convergence after {iterations} iterations"))
        }
        Error::InvalidGrid(_)
        | Error::LengthMismatch { .. }
        | Error::NonFinite { .. }
        | Error::InvalidInput(_)
        | Error::NotPositiveDefinite(_) => PyValueError::new_err(e.to_string()),
        e => FortetError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| FortetError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// Kernel and marginals on quadrature grids.
#[pyclass(module = "fortet", frozen)]
pub struct Problem {
    kernel: KernelOperator,
    marginals: MarginalPair,
}

#[pymethods]
impl Problem {
    /// Loads a JSON problem config.
    #[staticmethod]
    fn from_config(path: PathBuf) -> PyResult<Self> {
        let p = load_problem(&path).map_err(err)?;
        Ok(Problem {
            kernel: p.kernel,
            marginals: p.marginals,
        })
    }

    /// Heat kernel with centered Gaussian marginals on a trapezoid line grid.
    #[staticmethod]
    #[pyo3(signature = (sigma, sigma1, sigma2, radius = 8.0, points = 401))]
    fn gaussian(sigma: f64, sigma1: f64, sigma2: f64, radius: f64, points: usize) -> PyResult<Self> {
        let g = build_grid(&GridSpec {
            dim: 1,
            radius,
            points_per_axis: points,
            rule: QuadratureRule::Trapezoid,
        })
        .map_err(err)?;
        let kernel = KernelOperator::gaussian(g.clone(), g.clone(), sigma).map_err(err)?;
        let marginals = MarginalPair::new(
            DensityField::gaussian(g.clone(), &[0.0], sigma1).map_err(err)?,
            DensityField::gaussian(g, &[0.0], sigma2).map_err(err)?,
        )
        .map_err(err)?;
        Ok(Problem { kernel, marginals })
    }

    /// Dense kernel on explicit node sets (weights default to 1).
    #[staticmethod]
    #[pyo3(signature = (kernel, omega1, omega2, weights1 = None, weights2 = None))]
    fn from_matrix(
        kernel: Vec<Vec<f64>>,
        omega1: Vec<f64>,
        omega2: Vec<f64>,
        weights1: Option<Vec<f64>>,
        weights2: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let (n1, n2) = (omega1.len(), omega2.len());
        let grid = |n: usize, w: Option<Vec<f64>>| -> PyResult<Arc<QuadratureGrid>> {
            QuadratureGrid::from_nodes((0..n).map(|i| i as f64).collect(), w.unwrap_or_else(|| vec![1.0; n]))
                .map_err(err)
        };
        let (g1, g2) = (grid(n1, weights1)?, grid(n2, weights2)?);
        if kernel.len() != n1 || kernel.iter().any(|r| r.len() != n2) {
            return Err(PyValueError::new_err(format!("kernel must be {n1}x{n2}")));
        }
        let k = KernelOperator::from_matrix(g1.clone(), g2.clone(), kernel.concat()).map_err(err)?;
        let m = MarginalPair::new(
            DensityField::new(g1, omega1).map_err(err)?,
            DensityField::new(g2, omega2).map_err(err)?,
        )
        .map_err(err)?;
        Ok(Problem { kernel: k, marginals: m })
    }

    /// Marginals exchanged, kernel transposed.
    fn swapped(&self) -> Self {
        Problem {
            kernel: self.kernel.transposed(),
            marginals: self.marginals.swapped(),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.kernel.rows(), self.kernel.cols())
    }

    #[getter]
    fn nodes1(&self) -> Vec<f64> {
        self.kernel.grid1().coords().to_vec()
    }

    #[getter]
    fn nodes2(&self) -> Vec<f64> {
        self.kernel.grid2().coords().to_vec()
    }

    #[getter]
    fn omega1(&self) -> Vec<f64> {
        self.marginals.omega1().values().to_vec()
    }

    #[getter]
    fn omega2(&self) -> Vec<f64> {
        self.marginals.omega2().values().to_vec()
    }

    /// Hypothesis checks and the condition (star) verdict as a dict.
    fn feasibility<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = fortet_core::feasibility(&self.kernel, &self.marginals).map_err(err)?;
        to_dict(py, &report)
    }

    /// `tanh(diameter / 4)` for the kernel matrix, with the diameter.
    fn birkhoff_contraction<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let c = fortet_core::birkhoff_contraction(self.kernel.values(), self.kernel.rows(), self.kernel.cols())
            .map_err(err)?;
        to_dict(py, &c)
    }

    fn __repr__(&self) -> String {
        format!("Problem({}x{})", self.kernel.rows(), self.kernel.cols())
    }
}

/// Potentials returned by either solver.
#[pyclass(module = "fortet", frozen)]
pub struct Solution {
    pot: PotentialPair,
    #[pyo3(get)]
    solver: &'static str,
    /// `case1{n0}`, `case2`, `degenerate`, or None for Sinkhorn.
    #[pyo3(get)]
    case_tag: Option<String>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    backend: String,
    residuals: SystemResiduals,
    trace: Vec<TraceRow>,
}

#[pymethods]
impl Solution {
    #[getter]
    fn log_phi(&self) -> Vec<f64> {
        self.pot.log_phi.clone()
    }

    #[getter]
    fn log_psi(&self) -> Vec<f64> {
        self.pot.log_psi.clone()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.pot.phi()
    }

    #[getter]
    fn psi(&self) -> Vec<f64> {
        self.pot.psi()
    }

    #[getter]
    fn residuals<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.residuals)
    }

    /// Rows of `(n, sup_change, normalization_residual, hilbert_step, case1_candidate)`.
    #[getter]
    fn trace(&self) -> Vec<(usize, f64, f64, f64, bool)> {
        self.trace
            .iter()
            .map(|r| (r.n, r.sup_change, r.normalization_residual, r.hilbert_step, r.case1_candidate))
            .collect()
    }

    /// Weighted coupling `phi(x) g(x, y) psi(y)` as nested lists.
    fn coupling(&self, problem: &Problem) -> PyResult<Vec<Vec<f64>>> {
        let c = build_coupling(&self.pot, &problem.kernel, &problem.marginals).map_err(err)?;
        Ok(c.values().chunks(c.cols()).map(<[f64]>::to_vec).collect())
    }

    /// KL divergence of the coupling from the kernel measure.
    fn kl_objective(&self, problem: &Problem) -> PyResult<f64> {
        let c = build_coupling(&self.pot, &problem.kernel, &problem.marginals).map_err(err)?;
        Ok(kl_objective(&c, &problem.kernel, &problem.marginals).map_err(err)?.value)
    }

    /// Density at time `t` (heat kernels only): `(rho, mass, renorm_factor)`.
    fn interpolate(&self, problem: &Problem, t: f64) -> PyResult<(Vec<f64>, f64, f64)> {
        let r = entropic_interpolation(&self.pot, &problem.kernel, t).map_err(err)?;
        Ok((r.rho.values().to_vec(), r.mass, r.renorm_factor))
    }

    /// Ray comparison with another solution of the same problem.
    #[pyo3(signature = (other, problem, threshold = 1e-12, tol = 1e-8))]
    fn compare<'py>(
        &self,
        py: Python<'py>,
        other: &Solution,
        problem: &Problem,
        threshold: f64,
        tol: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let rep = verify_uniqueness(&self.pot, &other.pot, &problem.marginals, &UniquenessOptions { threshold, tol });
        to_dict(py, &rep)
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(solver={}, case_tag={}, iterations={})",
            self.solver,
            self.case_tag.as_deref().unwrap_or("None"),
            self.iterations
        )
    }
}

#[pyfunction]
#[pyo3(signature = (problem, tol = 1e-10, max_iter = 10_000, floor = "geometric:0.5", backend = "auto", force = false))]
fn solve_fortet(
    py: Python<'_>,
    problem: &Problem,
    tol: f64,
    max_iter: usize,
    floor: &str,
    backend: &str,
    force: bool,
) -> PyResult<Solution> {
    let opts = FortetOptions {
        tol,
        max_iter,
        floor: parse::<FloorSchedule>(floor)?,
        backend: parse::<Backend>(backend)?,
        force,
        ..Default::default()
    };
    let sol = py
        .detach(|| run_fortet(&problem.kernel, &problem.marginals, &opts))
        .map_err(err)?;
    let Some(pot) = sol.potentials else {
        return Err(FortetError::new_err(format!(
            "scheme terminated as {} after {} iterations; no potentials",
            sol.case_tag, sol.iterations
        )));
    };
    Ok(Solution {
        pot,
        solver: "fortet",
        case_tag: Some(sol.case_tag.to_string()),
        iterations: sol.iterations,
        backend: sol.backend.to_string(),
        residuals: sol.residuals,
        trace: sol.trace,
    })
}

#[pyfunction]
#[pyo3(signature = (problem, tol = 1e-10, max_iter = 10_000, backend = "auto"))]
fn solve_sinkhorn(py: Python<'_>, problem: &Problem, tol: f64, max_iter: usize, backend: &str) -> PyResult<Solution> {
    let opts = SinkhornOptions {
        tol,
        max_iter,
        backend: parse::<Backend>(backend)?,
    };
    let run = py
        .detach(|| run_sinkhorn_traced(&problem.kernel, &problem.marginals, &opts))
        .map_err(err)?;
    let pot = run.pair.potentials();
    let residuals = fortet_core::verify_system(&pot, &problem.kernel, &problem.marginals).map_err(err)?;
    Ok(Solution {
        pot,
        solver: "sinkhorn",
        case_tag: None,
        iterations: run.pair.iterations,
        backend: run.pair.backend.to_string(),
        residuals,
        trace: run.trace,
    })
}

/// Closed-form potentials for the 1-D Gaussian problem.
#[pyclass(module = "fortet", frozen)]
pub struct GaussianOracle {
    spec: GaussianBridgeSpec,
}

#[pymethods]
impl GaussianOracle {
    #[new]
    fn new(sigma: f64, sigma1: f64, sigma2: f64) -> PyResult<Self> {
        Ok(GaussianOracle {
            spec: fortet_core::gaussian_oracle(sigma, sigma1, sigma2).map_err(err)?,
        })
    }

    #[getter]
    fn a_phi(&self) -> f64 {
        self.spec.a_phi
    }

    #[getter]
    fn b_psi(&self) -> f64 {
        self.spec.b_psi
    }

    #[getter]
    fn swap_recommended(&self) -> bool {
        self.spec.swap_recommended
    }

    fn log_phi(&self, x: f64) -> f64 {
        self.spec.log_phi(x)
    }

    fn log_psi(&self, y: f64) -> f64 {
        self.spec.log_psi(y)
    }

    fn interpolation_variance(&self, t: f64) -> f64 {
        self.spec.interpolation_variance(t)
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.spec)
    }
}

#[pyfunction]
fn hilbert_distance(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    fortet_core::hilbert_distance(&x, &y).map_err(err)
}

#[pymodule]
fn fortet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add_class::<GaussianOracle>()?;
    m.add_function(wrap_pyfunction!(solve_fortet, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(hilbert_distance, m)?)?;
    m.add("FortetError", m.py().get_type::<FortetError>())?;
    m.add("NotConvergedError", m.py().get_type::<NotConvergedError>())?;
    Ok(())
}
