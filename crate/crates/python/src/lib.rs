//! Python bindings: meshes, control problems, solutions and convergence studies.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use crbc::control_ops::{p1_tilde_coeffs, p1_tilde_operator_norm};
use crbc::harness::expr::compile_field;
use crbc::harness::{self, Domain, MeshFamily, StudyConfig};
use crbc::mesh::{ensure_odd_boundary, refine_uniform, triangulate_polygon_fan, triangulate_unit_square};
use crbc::optimizer::{ControlOptions, ControlProblem};
use crbc::{BoundaryControl, BoxBounds, Error, OptimalitySolution, ProblemSpec};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_)
        | Error::InvalidBounds { .. }
        | Error::InvalidMesh(_)
        | Error::NonConvexPolygon { .. }
        | Error::EvenBoundary { .. }
        | Error::DimensionMismatch { .. }
        | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_domain(name: &str) -> PyResult<Domain> {
    match name {
        "square" => Ok(Domain::UnitSquare),
        "pentagon" => Ok(Domain::Pentagon),
        _ => Err(PyValueError::new_err(format!("unknown domain {name:?} (square or pentagon)"))),
    }
}

/// Triangle mesh with its Crouzeix-Raviart edge numbering and boundary cycle.
#[pyclass(name = "Mesh", module = "pycrbc", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: Arc<crbc::Mesh>,
}

#[pymethods]
impl PyMesh {
    /// `n x n` grid of the unit square, two triangles per cell.
    #[staticmethod]
    fn unit_square(n: usize) -> PyResult<Self> {
        Ok(PyMesh { inner: Arc::new(triangulate_unit_square(n).map_err(py_err)?) })
    }

    /// Centroid fan of a convex counterclockwise polygon.
    #[staticmethod]
    fn polygon(corners: Vec<[f64; 2]>) -> PyResult<Self> {
        Ok(PyMesh { inner: Arc::new(triangulate_polygon_fan(&corners).map_err(py_err)?) })
    }

    /// Level of the odd-boundary family used by the studies.
    #[staticmethod]
    fn family_level(domain: &str, level: usize) -> PyResult<Self> {
        let family = MeshFamily::new(parse_domain(domain)?).map_err(py_err)?;
        Ok(PyMesh { inner: family.level(level).map_err(py_err)? })
    }

    fn refine(&self) -> Self {
        PyMesh { inner: Arc::new(refine_uniform(&self.inner)) }
    }

    fn ensure_odd(&self) -> Self {
        PyMesh { inner: Arc::new(ensure_odd_boundary(&self.inner)) }
    }

    #[getter]
    fn num_triangles(&self) -> usize {
        self.inner.triangles.len()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.edges.len()
    }

    #[getter]
    fn num_boundary_edges(&self) -> usize {
        self.inner.num_boundary_edges()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    /// Lengths of the boundary edges in cycle order.
    fn boundary_lengths(&self) -> Vec<f64> {
        self.inner.boundary_lengths()
    }

    /// Midpoints of the boundary edges in cycle order.
    fn boundary_midpoints(&self) -> Vec<[f64; 2]> {
        self.inner.boundary_cycle.iter().map(|&e| self.inner.edges[e].midpoint).collect()
    }

    /// Norm of the map from piecewise constant controls to continuous traces.
    fn p1_tilde_norm(&self) -> PyResult<f64> {
        p1_tilde_operator_norm(&self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(triangles={}, edges={}, boundary_edges={}, h={:.4})",
            self.num_triangles(),
            self.num_edges(),
            self.num_boundary_edges(),
            self.inner.h
        )
    }
}

/// Discrete control problem assembled on one mesh.
#[pyclass(name = "Problem", module = "pycrbc", frozen)]
struct PyProblem {
    spec: ProblemSpec,
    problem: ControlProblem,
}

impl PyProblem {
    fn from_spec(spec: ProblemSpec) -> PyResult<Self> {
        let problem = ControlProblem::new(spec.clone()).map_err(py_err)?;
        Ok(PyProblem { spec, problem })
    }

    fn control(&self, u: Vec<f64>) -> PyResult<BoundaryControl> {
        BoundaryControl::new(self.spec.mesh.clone(), u).map_err(py_err)
    }
}

#[pymethods]
impl PyProblem {
    /// Manufactured unit-square problem with a closed-form solution and inactive bounds.
    #[staticmethod]
    #[pyo3(signature = (mesh, alpha = 1.0))]
    fn manufactured_inactive(mesh: &PyMesh, alpha: f64) -> PyResult<Self> {
        Self::from_spec(harness::manufactured_inactive(mesh.inner.clone(), alpha).map_err(py_err)?)
    }

    /// Same data with the lower bound raised to `-clip * pi / alpha`.
    #[staticmethod]
    #[pyo3(signature = (mesh, alpha = 1.0, clip = 0.5))]
    fn manufactured_active(mesh: &PyMesh, alpha: f64, clip: f64) -> PyResult<Self> {
        Self::from_spec(harness::manufactured_active(mesh.inner.clone(), alpha, clip).map_err(py_err)?)
    }

    /// Problem from source and target expressions in `x`, `y` and `pi`.
    #[staticmethod]
    #[pyo3(signature = (mesh, source, target, alpha = 1.0, bounds = (-1.0, 1.0)))]
    fn custom(mesh: &PyMesh, source: &str, target: &str, alpha: f64, bounds: (f64, f64)) -> PyResult<Self> {
        let f = compile_field(source).map_err(py_err)?;
        let yd = compile_field(target).map_err(py_err)?;
        let b = BoxBounds::new(bounds.0, bounds.1).map_err(py_err)?;
        Self::from_spec(ProblemSpec::new(mesh.inner.clone(), alpha, b, move |x| f(x), move |x| yd(x)).map_err(py_err)?)
    }

    #[getter]
    fn mesh(&self) -> PyMesh {
        PyMesh { inner: self.spec.mesh.clone() }
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.spec.alpha
    }

    #[getter]
    fn bounds(&self) -> (f64, f64) {
        (self.spec.bounds.u_a, self.spec.bounds.u_b)
    }

    fn objective(&self, u: Vec<f64>) -> PyResult<f64> {
        self.problem.objective(&self.control(u)?).map_err(py_err)
    }

    /// Reduced gradient, Riesz representative in `L2(Gamma)` on piecewise constants.
    fn gradient(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.problem.reduced_gradient(&self.control(u)?).map_err(py_err)?.coeffs)
    }

    fn kkt_residual(&self, u: Vec<f64>) -> PyResult<f64> {
        self.problem.kkt_residual(&self.control(u)?).map_err(py_err)
    }

    /// Projected gradient solve, optionally warm-started.
    #[pyo3(signature = (tol = None, max_iter = 5000, start = None))]
    fn solve(
        &self,
        py: Python<'_>,
        tol: Option<f64>,
        max_iter: usize,
        start: Option<Vec<f64>>,
    ) -> PyResult<PySolution> {
        let options = ControlOptions { tol, max_iter, ..Default::default() };
        let sol = py
            .detach(|| match &start {
                Some(u0) => self.problem.solve_control_from(u0, &options),
                None => self.problem.solve_control(&options),
            })
            .map_err(py_err)?;
        let errors = self.spec.exact.as_ref().map(|ex| {
            (
                sol.control.l2_error(|x, n| (ex.control)(x, n)),
                sol.state.composite.l2_error(|x| (ex.state)(x)),
                sol.flux.l2_error(|x, n| (ex.flux)(x, n)),
            )
        });
        let active = sol.active_count(&self.spec.bounds, 1e-12);
        Ok(PySolution { inner: sol, errors, active })
    }

    /// Dense QP solution on small meshes: `(control, objective)`.
    fn oracle(&self) -> PyResult<(Vec<f64>, f64)> {
        let q = crbc::optimizer::qp_oracle(&self.spec).map_err(py_err)?;
        Ok((q.control, q.objective))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.spec)
    }
}

/// Converged optimal control with its state, adjoint and flux.
#[pyclass(name = "Solution", module = "pycrbc", frozen)]
struct PySolution {
    inner: OptimalitySolution,
    errors: Option<(f64, f64, f64)>,
    active: usize,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn control(&self) -> Vec<f64> {
        self.inner.control.coeffs.clone()
    }

    /// Discrete flux at the boundary vertices in cycle order.
    #[getter]
    fn flux(&self) -> Vec<f64> {
        self.inner.flux.coeffs.clone()
    }

    /// State coefficients per edge.
    #[getter]
    fn state(&self) -> Vec<f64> {
        self.inner.state.composite.coeffs.clone()
    }

    #[getter]
    fn adjoint(&self) -> Vec<f64> {
        self.inner.adjoint.coeffs.clone()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    #[getter]
    fn kkt_residual(&self) -> f64 {
        self.inner.kkt_residual
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.active
    }

    /// `(control, state, flux)` errors against the closed form, when there is one.
    #[getter]
    fn errors(&self) -> Option<(f64, f64, f64)> {
        self.errors
    }

    /// Objective value per iteration, starting point first.
    fn objective_history(&self) -> Vec<f64> {
        self.inner.history.iter().map(|r| r.objective).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(objective={:.6e}, kkt_residual={:.2e}, iterations={}, active={})",
            self.inner.objective, self.inner.kkt_residual, self.inner.iterations, self.active
        )
    }
}

/// Convergence table on the unit-square family as CSV text.
#[pyfunction]
#[pyo3(signature = (problem = "inactive", levels = 4, first_level = 0, alpha = 1.0, clip = 0.5, reference_level = None))]
fn study(
    py: Python<'_>,
    problem: &str,
    levels: usize,
    first_level: usize,
    alpha: f64,
    clip: f64,
    reference_level: Option<usize>,
) -> PyResult<String> {
    let family = MeshFamily::new(Domain::UnitSquare).map_err(py_err)?;
    let mesh = family.level(first_level).map_err(py_err)?;
    let template = match problem {
        "inactive" => harness::manufactured_inactive(mesh, alpha),
        "active" => harness::manufactured_active(mesh, alpha, clip),
        _ => return Err(PyValueError::new_err(format!("unknown problem {problem:?} (inactive or active)"))),
    }
    .map_err(py_err)?;
    let config = StudyConfig {
        levels: (first_level..first_level + levels).collect(),
        reference_level,
        options: ControlOptions::default(),
    };
    let table = py.detach(|| harness::convergence_study(&template, &family, &config)).map_err(py_err)?;
    Ok(table.to_csv())
}

/// Continuous piecewise linear trace whose edge means are `u` (odd length).
#[pyfunction]
fn p1_tilde(u: Vec<f64>) -> PyResult<Vec<f64>> {
    p1_tilde_coeffs(&u).map_err(py_err)
}

#[pymodule]
fn pycrbc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    m.add_function(wrap_pyfunction!(p1_tilde, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
