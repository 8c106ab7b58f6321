//! State, adjoint and flux solves, the reduced gradient, and two solvers for
//! the discrete control problem: projected gradient and a dense QP oracle.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::assembly::{assemble_load, AssembledForms};
use crate::control_ops::{clamp_box, p1_tilde_coeffs, p1_tilde_transpose_coeffs, BoxBounds};
use crate::error::{Error, Result};
use crate::fespace::{tilde_extension, tri6, BoundaryControl, BoundaryTrace, CrFunction, W1Function};
use crate::linalg::{dense_eig_max, dense_inverse, dot, DenseCholesky, DenseMatrix, SpdSolver};
use crate::mesh::{Mesh, Point};

pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
/// Boundary data as a function of the point and the outward unit normal.
pub type BoundaryField = Arc<dyn Fn(Point, [f64; 2]) -> f64 + Send + Sync>;

/// Closed-form optimal control, state and adjoint of a manufactured problem.
#[derive(Clone)]
pub struct ExactSolution {
    pub control: BoundaryField,
    pub state: ScalarField,
    pub state_gradient: VectorField,
    pub adjoint: ScalarField,
    pub adjoint_gradient: VectorField,
    /// Outward normal derivative of the adjoint.
    pub flux: BoundaryField,
}

/// Data of one discrete control problem.
#[derive(Clone)]
pub struct ProblemSpec {
    pub mesh: Arc<Mesh>,
    pub alpha: f64,
    pub bounds: BoxBounds,
    pub source: ScalarField,
    pub target: ScalarField,
    pub exact: Option<ExactSolution>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("triangles", &self.mesh.triangles.len())
            .field("boundary_edges", &self.mesh.num_boundary_edges())
            .field("alpha", &self.alpha)
            .field("bounds", &self.bounds)
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        mesh: Arc<Mesh>,
        alpha: f64,
        bounds: BoxBounds,
        source: impl Fn(Point) -> f64 + Send + Sync + 'static,
        target: impl Fn(Point) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        BoxBounds::new(bounds.u_a, bounds.u_b)?;
        Ok(ProblemSpec { mesh, alpha, bounds, source: Arc::new(source), target: Arc::new(target), exact: None })
    }

    pub fn with_exact(mut self, exact: ExactSolution) -> Self {
        self.exact = Some(exact);
        self
    }

    /// Same data on another mesh.
    pub fn on_mesh(&self, mesh: Arc<Mesh>) -> Self {
        ProblemSpec { mesh, ..self.clone() }
    }
}

/// Discrete state `y_h = y_f + y_0 + z~`.
#[derive(Debug, Clone)]
pub struct StateSolution {
    pub y_f: CrFunction,
    pub y_0: CrFunction,
    pub z_tilde: W1Function,
    pub composite: CrFunction,
}

impl StateSolution {
    pub fn eval(&self, t: usize, bary: [f64; 3]) -> f64 {
        self.composite.eval(t, bary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub objective: f64,
    pub step: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct OptimalitySolution {
    pub control: BoundaryControl,
    pub state: StateSolution,
    pub adjoint: CrFunction,
    pub flux: BoundaryTrace,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

impl OptimalitySolution {
    /// Number of control components at a bound, to within `tol`.
    pub fn active_count(&self, bounds: &BoxBounds, tol: f64) -> usize {
        self.control.coeffs.iter().filter(|&&u| (u - bounds.u_a).abs() <= tol || (u - bounds.u_b).abs() <= tol).count()
    }
}

/// Step-size rule of the projected gradient method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Barzilai-Borwein trial steps with monotone Armijo backtracking.
    Armijo { initial: f64 },
    /// Constant step `u <- clamp(u - tau g)`.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct ControlOptions {
    pub step: StepRule,
    /// KKT tolerance; `None` means `1e-9 (1 + ||u0||)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions { step: StepRule::Armijo { initial: 1.0 }, tol: None, max_iter: 5000 }
    }
}

const ARMIJO_SIGMA: f64 = 1e-4;

struct Evaluation {
    z: Vec<f64>,
    y0_interior: Vec<f64>,
    y: Vec<f64>,
    objective: f64,
}

struct GradientData {
    gradient: Vec<f64>,
    xi: Vec<f64>,
    flux: Vec<f64>,
}

/// A [`ProblemSpec`] with its assembled operators and the control-independent
/// parts of the state and objective.
pub struct ControlProblem {
    pub spec: ProblemSpec,
    pub forms: AssembledForms,
    a00: SpdSolver,
    boundary_mass: DenseCholesky,
    y_f: Vec<f64>,
    target_load: Vec<f64>,
    target_sq: f64,
}

impl ControlProblem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        let m = spec.mesh.clone();
        let n = m.num_boundary_edges();
        if n.is_multiple_of(2) {
            return Err(Error::EvenBoundary { edges: n });
        }
        let forms = AssembledForms::new(&m)?;
        let a00 = SpdSolver::new(forms.stiffness_interior.clone())?;
        let boundary_mass = DenseCholesky::factor(&forms.boundary_mass.to_dense())?;
        let source = spec.source.clone();
        let rhs = forms.restrict_to_interior(&assemble_load(&m, |x| source(x)));
        let y_f = forms.prolong_interior(&a00.solve(&rhs, None)?, m.edges.len());
        let target = spec.target.clone();
        let target_load = assemble_load(&m, |x| target(x));
        let q = tri6();
        let target_sq = (0..m.triangles.len())
            .flat_map(|t| q.on_triangle(&m, t).map(|(x, _, w)| w * target(x).powi(2)).collect::<Vec<_>>())
            .sum();
        Ok(ControlProblem { spec, forms, a00, boundary_mass, y_f, target_load, target_sq })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.spec.mesh
    }

    pub fn num_controls(&self) -> usize {
        self.spec.mesh.num_boundary_edges()
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.num_controls() {
            return Err(Error::DimensionMismatch { expected: self.num_controls(), found: u.len() });
        }
        Ok(())
    }

    /// CR coefficients of the extension by zero of a boundary trace.
    fn extend(&self, z: &[f64]) -> Vec<f64> {
        self.forms.extension.mul_vec(z)
    }

    /// Interior part and full CR coefficients of the discrete harmonic
    /// extension of the boundary trace `z`.
    fn lift(&self, z: &[f64], guess: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let zt = self.extend(z);
        let az = self.forms.stiffness.mul_vec(&zt);
        let rhs: Vec<f64> = self.forms.interior_edges.iter().map(|&e| -az[e]).collect();
        let y0_interior = self.a00.solve(&rhs, guess)?;
        let mut y = self.forms.prolong_interior(&y0_interior, zt.len());
        for (yi, zi) in y.iter_mut().zip(&zt) {
            *yi += zi;
        }
        Ok((y0_interior, y))
    }

    fn evaluate(&self, u: &[f64], guess: Option<&[f64]>) -> Result<Evaluation> {
        self.check_control(u)?;
        let z = p1_tilde_coeffs(u)?;
        let (y0_interior, mut y) = self.lift(&z, guess)?;
        for (yi, fi) in y.iter_mut().zip(&self.y_f) {
            *yi += fi;
        }
        let objective = self.objective_from(&y, &z);
        Ok(Evaluation { z, y0_interior, y, objective })
    }

    /// The iterate moved by `du`, with the objective change computed from the
    /// quadratic expansion `<g, du> + 1/2 du^T H du` to avoid cancellation.
    fn step(&self, ev: &Evaluation, slope: f64, du: &[f64]) -> Result<(Evaluation, f64)> {
        let dz = p1_tilde_coeffs(du)?;
        let (dy0, dy) = self.lift(&dz, None)?;
        let curvature =
            self.forms.mass.bilinear(&dy, &dy) + self.spec.alpha * self.forms.boundary_mass.bilinear(&dz, &dz);
        let change = slope + 0.5 * curvature;
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
        let next = Evaluation {
            z: add(&ev.z, &dz),
            y0_interior: add(&ev.y0_interior, &dy0),
            y: add(&ev.y, &dy),
            objective: ev.objective + change,
        };
        Ok((next, change))
    }

    fn objective_from(&self, y: &[f64], z: &[f64]) -> f64 {
        0.5 * self.forms.mass.bilinear(y, y) - dot(y, &self.target_load)
            + 0.5 * self.target_sq
            + 0.5 * self.spec.alpha * self.forms.boundary_mass.bilinear(z, z)
    }

    /// `M y - (y_d, phi_e)`, the residual functional of the tracking term.
    fn tracking_residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r = self.forms.mass.mul_vec(y);
        for (ri, li) in r.iter_mut().zip(&self.target_load) {
            *ri -= li;
        }
        r
    }

    fn gradient_at(&self, ev: &Evaluation, guess: Option<&[f64]>) -> Result<GradientData> {
        let r = self.tracking_residual(&ev.y);
        let xi_i = self.a00.solve(&self.forms.restrict_to_interior(&r), guess)?;
        let xi = self.forms.prolong_interior(&xi_i, r.len());
        let mut w = self.forms.stiffness.mul_vec(&xi);
        for (wi, ri) in w.iter_mut().zip(&r) {
            *wi -= ri;
        }
        let functional = self.forms.extension.transpose_mul_vec(&w);
        let flux = self.boundary_mass.solve(&functional);
        let mut dz = self.forms.boundary_mass.mul_vec(&ev.z);
        for (d, f) in dz.iter_mut().zip(&functional) {
            *d = self.spec.alpha * *d - f;
        }
        let du = p1_tilde_transpose_coeffs(&dz)?;
        let gradient = du.iter().zip(&self.forms.control_metric).map(|(g, l)| g / l).collect();
        Ok(GradientData { gradient, xi, flux })
    }

    fn control(&self, u: Vec<f64>) -> BoundaryControl {
        BoundaryControl { mesh: self.spec.mesh.clone(), coeffs: u }
    }

    fn state_from(&self, ev: &Evaluation) -> StateSolution {
        let m = self.spec.mesh.clone();
        let ne = m.edges.len();
        let z = BoundaryTrace { mesh: m.clone(), coeffs: ev.z.clone() };
        StateSolution {
            y_f: CrFunction { mesh: m.clone(), coeffs: self.y_f.clone() },
            y_0: CrFunction { mesh: m.clone(), coeffs: self.forms.prolong_interior(&ev.y0_interior, ne) },
            z_tilde: tilde_extension(&z),
            composite: CrFunction { mesh: m, coeffs: ev.y.clone() },
        }
    }

    pub fn solve_state(&self, u: &BoundaryControl) -> Result<StateSolution> {
        let ev = self.evaluate(&u.coeffs, None)?;
        Ok(self.state_from(&ev))
    }

    /// Adjoint `xi` in the interior CR space with load `y_h - y_d`.
    pub fn solve_adjoint(&self, y: &StateSolution) -> Result<CrFunction> {
        let r = self.tracking_residual(&y.composite.coeffs);
        let xi = self.a00.solve(&self.forms.restrict_to_interior(&r), None)?;
        Ok(CrFunction { mesh: self.spec.mesh.clone(), coeffs: self.forms.prolong_interior(&xi, r.len()) })
    }

    /// Discrete normal derivative of the adjoint, recovered variationally on
    /// the boundary traces.
    pub fn discrete_flux(&self, xi: &CrFunction, y: &StateSolution) -> Result<BoundaryTrace> {
        let r = self.tracking_residual(&y.composite.coeffs);
        let mut w = self.forms.stiffness.mul_vec(&xi.coeffs);
        for (wi, ri) in w.iter_mut().zip(&r) {
            *wi -= ri;
        }
        let functional = self.forms.extension.transpose_mul_vec(&w);
        Ok(BoundaryTrace { mesh: self.spec.mesh.clone(), coeffs: self.boundary_mass.solve(&functional) })
    }

    /// `J_h(u) = 1/2 ||y_h - y_d||^2 + alpha/2 ||P1~ u||^2_{L2(Gamma)}`.
    pub fn objective(&self, u: &BoundaryControl) -> Result<f64> {
        Ok(self.evaluate(&u.coeffs, None)?.objective)
    }

    /// Gradient of `J_h` in the `L2(Gamma)` inner product on piecewise constants.
    pub fn reduced_gradient(&self, u: &BoundaryControl) -> Result<BoundaryControl> {
        let ev = self.evaluate(&u.coeffs, None)?;
        Ok(self.control(self.gradient_at(&ev, None)?.gradient))
    }

    fn metric_norm(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.forms.control_metric).map(|(x, l)| l * x * x).sum::<f64>().sqrt()
    }

    fn metric_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.forms.control_metric).map(|((x, y), l)| l * x * y).sum()
    }

    fn projected_residual(&self, u: &[f64], g: &[f64]) -> f64 {
        let b = self.spec.bounds;
        let r: Vec<f64> = u.iter().zip(g).map(|(&ui, &gi)| ui - b.clamp(ui - gi)).collect();
        self.metric_norm(&r)
    }

    /// `||u - clamp(u - g(u))||_{L2(Gamma)}`.
    pub fn kkt_residual(&self, u: &BoundaryControl) -> Result<f64> {
        let g = self.reduced_gradient(u)?;
        Ok(self.projected_residual(&u.coeffs, &g.coeffs))
    }

    /// Projected gradient from `clamp(0)`.
    pub fn solve_control(&self, options: &ControlOptions) -> Result<OptimalitySolution> {
        let u0 = clamp_box(&vec![0.0; self.num_controls()], &self.spec.bounds);
        self.solve_control_from(&u0, options)
    }

    pub fn solve_control_from(&self, u0: &[f64], options: &ControlOptions) -> Result<OptimalitySolution> {
        self.check_control(u0)?;
        let bounds = self.spec.bounds;
        let mut u = clamp_box(u0, &bounds);
        let tol = options.tol.unwrap_or(1e-9 * (1.0 + self.metric_norm(&u)));
        let mut ev = self.evaluate(&u, None)?;
        let mut gd = self.gradient_at(&ev, None)?;
        let mut residual = self.projected_residual(&u, &gd.gradient);
        let mut history = vec![IterationRecord { objective: ev.objective, step: 0.0, residual }];
        let mut tau = match options.step {
            StepRule::Armijo { initial } | StepRule::Fixed(initial) => initial,
        };
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {tau}")));
        }
        let mut iterations = 0;
        while residual > tol {
            if iterations >= options.max_iter {
                return Err(Error::ControlNotConverged { iterations, residual, last_control: u });
            }
            iterations += 1;
            let trial = |t: f64| -> Vec<f64> {
                u.iter().zip(&gd.gradient).map(|(&ui, &gi)| bounds.clamp(ui - t * gi)).collect()
            };
            let (u_new, ev_new, step) = match options.step {
                StepRule::Fixed(t) => {
                    let un = trial(t);
                    let du: Vec<f64> = un.iter().zip(&u).map(|(a, b)| a - b).collect();
                    let (en, _) = self.step(&ev, self.metric_dot(&gd.gradient, &du), &du)?;
                    (un, en, t)
                }
                StepRule::Armijo { .. } => {
                    let mut t = tau;
                    loop {
                        let un = trial(t);
                        let du: Vec<f64> = un.iter().zip(&u).map(|(a, b)| a - b).collect();
                        let slope = self.metric_dot(&gd.gradient, &du);
                        let (en, change) = self.step(&ev, slope, &du)?;
                        if change <= ARMIJO_SIGMA * slope || t < 1e-20 {
                            break (un, en, t);
                        }
                        t *= 0.5;
                    }
                }
            };
            let gd_new = self.gradient_at(&ev_new, Some(&self.forms.restrict_to_interior(&gd.xi)))?;
            if let StepRule::Armijo { .. } = options.step {
                let s: Vec<f64> = u_new.iter().zip(&u).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = gd_new.gradient.iter().zip(&gd.gradient).map(|(a, b)| a - b).collect();
                let sy = self.metric_dot(&s, &yv);
                let ss = self.metric_dot(&s, &s);
                tau = if sy > 0.0 && ss > 0.0 { ss / sy } else { (2.0 * step).max(1e-12) };
            }
            u = u_new;
            ev = ev_new;
            gd = gd_new;
            residual = self.projected_residual(&u, &gd.gradient);
            history.push(IterationRecord { objective: ev.objective, step, residual });
        }
        let state = self.state_from(&ev);
        let m = self.spec.mesh.clone();
        Ok(OptimalitySolution {
            control: self.control(u),
            state,
            adjoint: CrFunction { mesh: m.clone(), coeffs: gd.xi },
            flux: BoundaryTrace { mesh: m, coeffs: gd.flux },
            objective: self.objective_from(&ev.y, &ev.z),
            kkt_residual: residual,
            iterations,
            history,
        })
    }
}

/// Largest boundary the dense QP oracle accepts.
pub const ORACLE_MAX_EDGES: usize = 24;

/// Reduced quadratic program `min 1/2 u^T H u - b^T u + c` over the box.
#[derive(Debug, Clone)]
pub struct QpOracle {
    pub hessian: DenseMatrix,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub control: Vec<f64>,
    pub objective: f64,
}

/// Builds the reduced QP with dense linear algebra only and solves it by
/// projected gradient with step `1 / lambda_max(H)`, finished by an
/// exact solve on the free components.
pub fn qp_oracle(spec: &ProblemSpec) -> Result<QpOracle> {
    let m = &spec.mesh;
    let n = m.num_boundary_edges();
    if n > ORACLE_MAX_EDGES {
        return Err(Error::OracleTooLarge { edges: n, limit: ORACLE_MAX_EDGES });
    }
    if n.is_multiple_of(2) {
        return Err(Error::EvenBoundary { edges: n });
    }
    let forms = AssembledForms::new(m)?;
    let ne = m.edges.len();
    let a = forms.stiffness.to_dense();
    let a00 = DenseCholesky::factor(&forms.stiffness_interior.to_dense())?;
    let mass = forms.mass.to_dense();
    let mg = forms.boundary_mass.to_dense();
    let binv = dense_inverse(&forms.p0.to_dense())?;
    let ext = forms.extension.to_dense();
    let interior = &forms.interior_edges;

    // Discrete harmonic extension of a CR vector with given boundary part.
    let lift = |zt: Vec<f64>| -> Vec<f64> {
        let az = a.mul_vec(&zt);
        let rhs: Vec<f64> = interior.iter().map(|&e| -az[e]).collect();
        let y0 = a00.solve(&rhs);
        let mut y = zt;
        for (k, &e) in interior.iter().enumerate() {
            y[e] += y0[k];
        }
        y
    };

    let mut s = DenseMatrix::zeros(ne, n);
    for k in 0..n {
        s.set_column(k, &lift(ext.mul_vec(&binv.column(k))));
    }
    let source = spec.source.clone();
    let target = spec.target.clone();
    let load_f = assemble_load(m, |x| source(x));
    let rhs: Vec<f64> = interior.iter().map(|&e| load_f[e]).collect();
    let yf_i = a00.solve(&rhs);
    let mut y_f = vec![0.0; ne];
    for (k, &e) in interior.iter().enumerate() {
        y_f[e] = yf_i[k];
    }
    let l_d = assemble_load(m, |x| target(x));

    let st = s.transpose();
    let mut hessian = st.matmul(&mass).matmul(&s);
    let reg = binv.transpose().matmul(&mg).matmul(&binv);
    for i in 0..n {
        for j in 0..n {
            hessian[(i, j)] += spec.alpha * reg[(i, j)];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (hessian[(i, j)] + hessian[(j, i)]);
            hessian[(i, j)] = v;
            hessian[(j, i)] = v;
        }
    }
    let my_f = mass.mul_vec(&y_f);
    let resid: Vec<f64> = my_f.iter().zip(&l_d).map(|(a, b)| a - b).collect();
    let linear: Vec<f64> = st.mul_vec(&resid).iter().map(|v| -v).collect();
    let q = tri6();
    let target_sq: f64 = (0..m.triangles.len())
        .flat_map(|t| q.on_triangle(m, t).map(|(x, _, w)| w * target(x).powi(2)).collect::<Vec<_>>())
        .sum();
    let constant = 0.5 * dot(&y_f, &my_f) - dot(&y_f, &l_d) + 0.5 * target_sq;

    let control = solve_box_qp(&hessian, &linear, &spec.bounds)?;
    let hu = hessian.mul_vec(&control);
    let objective = 0.5 * dot(&control, &hu) - dot(&linear, &control) + constant;
    Ok(QpOracle { hessian, linear, constant, control, objective })
}

/// Minimizes `1/2 u^T H u - b^T u` over `[u_a, u_b]^n` for SPD `H`.
pub fn solve_box_qp(h: &DenseMatrix, b: &[f64], bounds: &BoxBounds) -> Result<Vec<f64>> {
    let n = b.len();
    let lmax = dense_eig_max(h)?;
    if !(lmax > 0.0) {
        return Err(Error::Singular("QP Hessian has no positive eigenvalue".into()));
    }
    let step = 1.0 / lmax;
    let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs())) + bounds.u_a.abs().max(bounds.u_b.abs()) * lmax;
    let grad = |u: &[f64]| -> Vec<f64> { h.mul_vec(u).iter().zip(b).map(|(a, c)| a - c).collect() };
    let kkt = |u: &[f64]| -> f64 {
        let g = grad(u);
        u.iter().zip(&g).map(|(&ui, &gi)| (ui - bounds.clamp(ui - gi)).abs()).fold(0.0, f64::max)
    };
    let mut u = clamp_box(&vec![0.0; n], bounds);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _round in 0..1000 {
        for _ in 0..2000 {
            let g = grad(&u);
            u = u.iter().zip(&g).map(|(&ui, &gi)| bounds.clamp(ui - step * gi)).collect();
        }
        if let Some(polished) = polish_free_set(h, b, bounds, &u) {
            let r = kkt(&polished);
            if r <= 1e-12 * scale {
                return Ok(polished);
            }
            if best.as_ref().is_none_or(|(br, _)| r < *br) {
                best = Some((r, polished));
            }
        }
        let r = kkt(&u);
        if r <= 1e-12 * scale {
            return Ok(u);
        }
    }
    match best {
        Some((_, u)) => Ok(u),
        None => Err(Error::Singular("box QP did not settle on an active set".into())),
    }
}

/// Exact minimizer with the active set of `u` frozen, if it stays feasible.
fn polish_free_set(h: &DenseMatrix, b: &[f64], bounds: &BoxBounds, u: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let width = bounds.u_b - bounds.u_a;
    let at_bound = |v: f64| v <= bounds.u_a + 1e-12 * width || v >= bounds.u_b - 1e-12 * width;
    let free: Vec<usize> = (0..n).filter(|&i| !at_bound(u[i])).collect();
    let snap = |v: f64| if (v - bounds.u_a).abs() <= (v - bounds.u_b).abs() { bounds.u_a } else { bounds.u_b };
    let mut out: Vec<f64> = u.iter().map(|&v| if at_bound(v) { snap(v) } else { v }).collect();
    if !free.is_empty() {
        let mut hff = DenseMatrix::zeros(free.len(), free.len());
        let mut rhs = vec![0.0; free.len()];
        for (a, &i) in free.iter().enumerate() {
            rhs[a] = b[i];
            for j in 0..n {
                if at_bound(u[j]) {
                    rhs[a] -= h[(i, j)] * out[j];
                }
            }
            for (c, &j) in free.iter().enumerate() {
                hff[(a, c)] = h[(i, j)];
            }
        }
        let sol = DenseCholesky::factor(&hff).ok()?.solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            if !bounds.contains(sol[a]) {
                return None;
            }
            out[i] = sol[a];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_ops::p0_project_fn;
    use crate::mesh::{ensure_odd_boundary, regular_polygon, triangulate_polygon_fan, triangulate_unit_square};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(ensure_odd_boundary(&triangulate_unit_square(n).unwrap()))
    }

    fn bounds(a: f64, b: f64) -> BoxBounds {
        BoxBounds::new(a, b).unwrap()
    }

    fn random_problem(mesh: Arc<Mesh>, rng: &mut impl Rng) -> ProblemSpec {
        let alpha = 10f64.powf(rng.gen_range(-2.0..0.0));
        let ua = rng.gen_range(-1.0..-0.05);
        let ub = rng.gen_range(0.05..1.0);
        let (a, b, c, d) =
            (rng.gen_range(-20.0..20.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0));
        ProblemSpec::new(
            mesh,
            alpha,
            bounds(ua, ub),
            move |x| a * (PI * x[0]).sin() * (1.0 + x[1]) + b,
            move |x| c * x[0] * x[1] + d * (2.0 * x[1]).cos(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_even_boundary_and_bad_alpha() {
        let m = Arc::new(triangulate_unit_square(2).unwrap());
        assert!(ProblemSpec::new(m.clone(), 0.0, bounds(-1.0, 1.0), |_| 0.0, |_| 0.0).is_err());
        let spec = ProblemSpec::new(m, 1.0, bounds(-1.0, 1.0), |_| 0.0, |_| 0.0).unwrap();
        assert!(matches!(ControlProblem::new(spec), Err(Error::EvenBoundary { edges: 8 })));
    }

    #[test]
    fn constant_reproduction() {
        for m in [square(2), square(5), Arc::new(triangulate_polygon_fan(&regular_polygon(5)).unwrap())] {
            let spec = ProblemSpec::new(m.clone(), 1.0, bounds(-5.0, 5.0), |_| 0.0, |_| 0.0).unwrap();
            let p = ControlProblem::new(spec).unwrap();
            let y = p.solve_state(&BoundaryControl::constant(m, 1.7)).unwrap();
            assert!(y.composite.l2_error(|_| 1.7) < 1e-10);
            // Boundary edge means reproduce the control.
            for &e in &y.composite.mesh.boundary_cycle {
                assert!((y.composite.coeffs[e] - 1.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_means_equal_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = square(3);
        let p = ControlProblem::new(random_problem(m.clone(), &mut rng)).unwrap();
        let u: Vec<f64> = (0..p.num_controls()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = p.solve_state(&BoundaryControl::new(m.clone(), u.clone()).unwrap()).unwrap();
        for (i, &e) in m.boundary_cycle.iter().enumerate() {
            assert!((y.composite.coeffs[e] - u[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_state_rates() {
        let (mut l2, mut en) = (Vec::new(), Vec::new());
        for n in [4, 8, 16] {
            let m = square(n);
            let spec = ProblemSpec::new(
                m.clone(),
                1.0,
                bounds(-1.0, 1.0),
                |x| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin(),
                |_| 0.0,
            )
            .unwrap();
            let p = ControlProblem::new(spec).unwrap();
            let y = p.solve_state(&BoundaryControl::constant(m, 0.0)).unwrap();
            l2.push(y.composite.l2_error(|x| (PI * x[0]).sin() * (PI * x[1]).sin()));
            en.push(y.composite.broken_energy_error(|x| {
                [PI * (PI * x[0]).cos() * (PI * x[1]).sin(), PI * (PI * x[0]).sin() * (PI * x[1]).cos()]
            }));
        }
        for k in 0..2 {
            assert!((l2[k] / l2[k + 1]).log2() > 1.8, "{l2:?}");
            assert!((en[k] / en[k + 1]).log2() > 0.9, "{en:?}");
        }
    }

    #[test]
    fn adjoint_vanishes_on_matching_target_and_is_symmetric() {
        let m = square(3);
        let spec = ProblemSpec::new(m.clone(), 1.0, bounds(-2.0, 2.0), |_| 0.0, |_| 0.75).unwrap();
        let p = ControlProblem::new(spec).unwrap();
        let y = p.solve_state(&BoundaryControl::constant(m, 0.75)).unwrap();
        let xi = p.solve_adjoint(&y).unwrap();
        assert!(xi.coeffs.iter().all(|v| v.abs() < 1e-12));
        let flux = p.discrete_flux(&xi, &y).unwrap();
        assert!(flux.coeffs.iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = p.forms.interior_edges.len();
        let r1: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r2: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (s1, s2) = (p.a00.solve(&r1, None).unwrap(), p.a00.solve(&r2, None).unwrap());
        assert!((dot(&s1, &r2) - dot(&s2, &r1)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in [square(2), square(4)] {
            let p = ControlProblem::new(random_problem(m.clone(), &mut rng)).unwrap();
            let n = p.num_controls();
            let u = BoundaryControl::new(m.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let g = p.reduced_gradient(&u).unwrap();
            for _ in 0..5 {
                let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let h = 1e-5;
                let shifted = |s: f64| {
                    let c = u.coeffs.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                    p.objective(&BoundaryControl::new(m.clone(), c).unwrap()).unwrap()
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an = p.metric_dot(&g.coeffs, &d);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn large_alpha_gradient_follows_control() {
        let m = square(2);
        let alpha = 1e6;
        let spec = ProblemSpec::new(m.clone(), alpha, bounds(-1.0, 1.0), |_| 0.0, |_| 0.0).unwrap();
        let p = ControlProblem::new(spec).unwrap();
        let u = BoundaryControl::constant(m, 0.3);
        let g = p.reduced_gradient(&u).unwrap();
        // Constants are fixed by P1~ and the state term is O(1), so g ~ alpha u.
        for v in &g.coeffs {
            assert!((v / alpha - 0.3).abs() < 1e-5);
        }
    }

    #[test]
    fn trivial_problem_has_zero_solution() {
        let m = square(2);
        let spec = ProblemSpec::new(m.clone(), 1.0, bounds(-1.0, 1.0), |_| 0.0, |_| 0.0).unwrap();
        let p = ControlProblem::new(spec.clone()).unwrap();
        assert_eq!(p.kkt_residual(&BoundaryControl::constant(m, 0.0)).unwrap(), 0.0);
        let sol = p.solve_control(&ControlOptions::default()).unwrap();
        assert!(sol.control.coeffs.iter().all(|v| v.abs() < 1e-14));
        assert!(sol.objective.abs() < 1e-14);
        let oracle = qp_oracle(&spec).unwrap();
        assert!(oracle.control.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn narrow_box_forces_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = square(2);
        let mut spec = random_problem(m, &mut rng);
        spec.bounds = bounds(0.4, 0.4 + 1e-9);
        let sol = ControlProblem::new(spec).unwrap().solve_control(&ControlOptions::default()).unwrap();
        assert!(sol.control.coeffs.iter().all(|v| (v - 0.4).abs() <= 1e-9));
    }

    #[test]
    fn projected_gradient_descends_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [square(2), Arc::new(triangulate_polygon_fan(&regular_polygon(5)).unwrap())] {
            for _ in 0..3 {
                let spec = random_problem(m.clone(), &mut rng);
                let p = ControlProblem::new(spec.clone()).unwrap();
                let sol = p.solve_control(&ControlOptions::default()).unwrap();
                for w in sol.history.windows(2) {
                    assert!(w[1].objective <= w[0].objective + 1e-14 * (1.0 + w[0].objective.abs()));
                }
                assert!(sol.control.coeffs.iter().all(|&v| spec.bounds.contains(v)));
                let oracle = qp_oracle(&spec).unwrap();
                let diff: Vec<f64> = sol.control.coeffs.iter().zip(&oracle.control).map(|(a, b)| a - b).collect();
                assert!(p.metric_norm(&diff) < 1e-8, "{diff:?}");
                assert!((sol.objective - oracle.objective).abs() <= 1e-12 * (1.0 + sol.objective.abs()));
                assert!(
                    p.kkt_residual(&BoundaryControl::new(m.clone(), oracle.control.clone()).unwrap()).unwrap() < 1e-8
                );
            }
        }
    }

    #[test]
    fn oracle_hessian_and_free_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = square(2);
        let mut spec = random_problem(m, &mut rng);
        spec.bounds = bounds(-1e3, 1e3);
        let o = qp_oracle(&spec).unwrap();
        assert!(o.hessian.is_symmetric(0.0));
        assert!(DenseCholesky::factor(&o.hessian).is_ok());
        let hu = o.hessian.mul_vec(&o.control);
        for (a, b) in hu.iter().zip(&o.linear) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn oracle_refuses_large_boundaries() {
        let m = square(8);
        let spec = ProblemSpec::new(m, 1.0, bounds(-1.0, 1.0), |_| 0.0, |_| 0.0).unwrap();
        assert!(matches!(qp_oracle(&spec), Err(Error::OracleTooLarge { edges: 33, .. })));
    }

    #[test]
    fn fixed_step_iteration_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_problem(square(2), &mut rng);
        let p = ControlProblem::new(spec.clone()).unwrap();
        let h = qp_oracle(&spec).unwrap().hessian;
        // The oracle Hessian is in coefficient space; scale to the edge-length metric.
        let tau = p.forms.control_metric.iter().cloned().fold(f64::INFINITY, f64::min) / dense_eig_max(&h).unwrap();
        let opts = ControlOptions { step: StepRule::Fixed(tau), tol: Some(1e-8), max_iter: 200_000 };
        let sol = p.solve_control(&opts).unwrap();
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn max_iter_reports_last_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ControlProblem::new(random_problem(square(2), &mut rng)).unwrap();
        let opts = ControlOptions { max_iter: 1, tol: Some(1e-30), ..Default::default() };
        match p.solve_control(&opts) {
            Err(Error::ControlNotConverged { iterations, last_control, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last_control.len(), p.num_controls());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn smooth_boundary_data_rate() {
        let g = |x: Point, _: [f64; 2]| (x[0] + 2.0 * x[1]).sin();
        let reference_mesh = square(32);
        let spec = |m: Arc<Mesh>| ProblemSpec::new(m, 1.0, bounds(-2.0, 2.0), |_| 0.0, |_| 0.0).unwrap();
        let rp = ControlProblem::new(spec(reference_mesh.clone())).unwrap();
        let yref = rp.solve_state(&p0_project_fn(reference_mesh.clone(), g)).unwrap();
        let locator = crate::mesh::PointLocator::new(&reference_mesh);
        let mut errs = Vec::new();
        for n in [4, 8] {
            let m = square(n);
            let p = ControlProblem::new(spec(m.clone())).unwrap();
            let y = p.solve_state(&p0_project_fn(m.clone(), g)).unwrap();
            let q = tri6();
            let mut s = 0.0;
            for t in 0..m.triangles.len() {
                for (x, b, w) in q.on_triangle(&m, t) {
                    let (rt, rb) = locator.locate(x).unwrap();
                    s += w * (y.eval(t, b) - yref.eval(rt, rb)).powi(2);
                }
            }
            errs.push(s.sqrt());
        }
        assert!((errs[0] / errs[1]).log2() > 0.9, "{errs:?}");
    }
}
