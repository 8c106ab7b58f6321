//! Manufactured problems, mesh families, cross-mesh error measurement and
//! convergence studies.

pub mod cli;
pub mod expr;
mod table;

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

pub use table::{eoc, ConvergenceRow, ConvergenceTable, StudyMeta};

use rand::Rng;
use serde::Serialize;

use crate::control_ops::{clamp_box, p1_tilde_operator_norm, BoxBounds};
use crate::error::{Error, Result};
use crate::fespace::{
    barycentric_of, broken_energy_norm_of_gradients, edge6, enrichment_defect, tri6, BoundaryControl, BoundaryTrace,
    CrFunction,
};
use crate::mesh::{
    ensure_odd_boundary, refine_uniform, regular_polygon, triangulate_polygon_fan, triangulate_unit_square, Mesh,
    Point, PointLocator,
};
use crate::optimizer::{qp_oracle, ControlOptions, ControlProblem, ExactSolution, OptimalitySolution, ProblemSpec};

/// Polygonal domain of a mesh family.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    UnitSquare,
    Pentagon,
    Polygon(Vec<Point>),
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::UnitSquare => "square",
            Domain::Pentagon => "pentagon",
            Domain::Polygon(_) => "polygon",
        }
    }
}

/// Meshes of one domain indexed by refinement level, each with an odd
/// boundary edge count.
///
/// Level `k` of the square is the `2^(k+1) x 2^(k+1)` grid; level `k` of a
/// polygon is its centroid fan refined `k` times. Either is then passed
/// through [`ensure_odd_boundary`].
#[derive(Debug, Clone)]
pub struct MeshFamily {
    pub domain: Domain,
    base: Option<Mesh>,
}

impl MeshFamily {
    pub fn new(domain: Domain) -> Result<Self> {
        let base = match &domain {
            Domain::UnitSquare => None,
            Domain::Pentagon => Some(triangulate_polygon_fan(&regular_polygon(5))?),
            Domain::Polygon(corners) => Some(triangulate_polygon_fan(corners)?),
        };
        Ok(MeshFamily { domain, base })
    }

    /// The uniformly refined mesh before the parity fix.
    pub fn uniform_level(&self, level: usize) -> Result<Mesh> {
        match &self.base {
            None => triangulate_unit_square(1 << (level + 1)),
            Some(base) => {
                let mut m = base.clone();
                for _ in 0..level {
                    m = refine_uniform(&m);
                }
                Ok(m)
            }
        }
    }

    pub fn level(&self, level: usize) -> Result<Arc<Mesh>> {
        Ok(Arc::new(ensure_odd_boundary(&self.uniform_level(level)?)))
    }
}

fn theta(x: Point) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin()
}

fn theta_gradient(x: Point) -> [f64; 2] {
    [PI * (PI * x[0]).cos() * (PI * x[1]).sin(), PI * (PI * x[0]).sin() * (PI * x[1]).cos()]
}

fn manufactured_data(alpha: f64) -> (impl Fn(Point) -> f64 + Clone, impl Fn(Point) -> f64 + Clone) {
    let ybar = move |x: Point| -(PI / alpha) * ((PI * x[0]).sin() + (PI * x[1]).sin());
    let f = move |x: Point| PI * PI * ybar(x);
    let yd = move |x: Point| ybar(x) - 2.0 * PI * PI * theta(x);
    (f, yd)
}

/// Unit-square problem whose optimal triple is known in closed form:
/// `theta = sin(pi x) sin(pi y)`, `u = d_n theta / alpha`,
/// `y = -(pi / alpha)(sin(pi x) + sin(pi y))`, with bounds that stay inactive.
pub fn manufactured_inactive(mesh: Arc<Mesh>, alpha: f64) -> Result<ProblemSpec> {
    let bounds = BoxBounds::new(-PI / alpha - 1.0, 1.0)?;
    let (f, yd) = manufactured_data(alpha);
    let flux = |x: Point, n: [f64; 2]| {
        let g = theta_gradient(x);
        g[0] * n[0] + g[1] * n[1]
    };
    let exact = ExactSolution {
        control: Arc::new(move |x, n| flux(x, n) / alpha),
        state: Arc::new(move |x| -(PI / alpha) * ((PI * x[0]).sin() + (PI * x[1]).sin())),
        state_gradient: Arc::new(move |x| {
            [-(PI * PI / alpha) * (PI * x[0]).cos(), -(PI * PI / alpha) * (PI * x[1]).cos()]
        }),
        adjoint: Arc::new(theta),
        adjoint_gradient: Arc::new(theta_gradient),
        flux: Arc::new(flux),
    };
    Ok(ProblemSpec::new(mesh, alpha, bounds, f, yd)?.with_exact(exact))
}

/// The data of [`manufactured_inactive`] with the lower bound raised to
/// `-clip pi / alpha`, so the constraint is active near the side midpoints.
pub fn manufactured_active(mesh: Arc<Mesh>, alpha: f64, clip: f64) -> Result<ProblemSpec> {
    if !(clip > 0.0 && clip < 1.0) {
        return Err(Error::InvalidParameter(format!("clip fraction must lie in (0, 1), got {clip}")));
    }
    let bounds = BoxBounds::new(-clip * PI / alpha, 1.0)?;
    let (f, yd) = manufactured_data(alpha);
    ProblemSpec::new(mesh, alpha, bounds, f, yd)
}

/// Tolerance of reference solves.
pub const REFERENCE_TOL: f64 = 1e-11;

/// High-accuracy solve of `template` on `family.level(level)`, by nested
/// iteration: each level starts from the projected solution of the previous one.
pub fn reference_solution(template: &ProblemSpec, family: &MeshFamily, level: usize) -> Result<OptimalitySolution> {
    let options = ControlOptions { tol: Some(REFERENCE_TOL), max_iter: 50_000, ..Default::default() };
    let mut previous: Option<BoundaryControl> = None;
    let mut solution = None;
    for k in level.saturating_sub(3)..=level {
        let mesh = family.level(k)?;
        let p = ControlProblem::new(template.on_mesh(mesh.clone()))?;
        let start = match &previous {
            Some(u) => transfer_control(u, &mesh),
            None => clamp_box(&vec![0.0; mesh.num_boundary_edges()], &template.bounds),
        };
        let opts = if k == level { options } else { ControlOptions { tol: Some(1e-8), ..options } };
        let sol = p.solve_control_from(&start, &opts)?;
        previous = Some(sol.control.clone());
        solution = Some(sol);
    }
    Ok(solution.expect("at least one level solved"))
}

/// `L2(Gamma)` projection of a piecewise constant control onto the boundary
/// edges of another mesh of the same domain.
pub fn transfer_control(u: &BoundaryControl, target: &Mesh) -> Vec<f64> {
    let lengths = target.boundary_lengths();
    let mut out = vec![0.0; target.num_boundary_edges()];
    for (lo, hi, i, j) in overlaps(target, &u.mesh) {
        out[i] += (hi - lo) * u.coeffs[j];
    }
    out.iter().zip(&lengths).map(|(v, l)| v / l).collect()
}

/// Cumulative boundary arclength from the first cycle vertex, `N + 1` entries.
pub fn boundary_arclength(m: &Mesh) -> Vec<f64> {
    let mut s = vec![0.0];
    for l in m.boundary_lengths() {
        s.push(s.last().unwrap() + l);
    }
    s
}

/// Common refinement of two boundary partitions of the same curve, as
/// `(start, end, edge in a, edge in b)` in the arclength of `a`.
fn overlaps(a: &Mesh, b: &Mesh) -> Vec<(f64, f64, usize, usize)> {
    let sa = boundary_arclength(a);
    let sb = boundary_arclength(b);
    let scale = sa.last().unwrap() / sb.last().unwrap();
    let sb: Vec<f64> = sb.iter().map(|s| s * scale).collect();
    let (na, nb) = (sa.len() - 1, sb.len() - 1);
    let mut out = Vec::with_capacity(na + nb);
    let (mut i, mut j, mut lo) = (0, 0, 0.0);
    while i < na && j < nb {
        let hi = sa[i + 1].min(sb[j + 1]);
        if hi > lo {
            out.push((lo, hi, i, j));
        }
        lo = hi;
        if sa[i + 1] <= hi {
            i += 1;
        }
        if sb[j + 1] <= hi {
            j += 1;
        }
    }
    out
}

/// `L2(Gamma)` distance of two piecewise constant controls on different meshes
/// of one domain, integrated exactly over the overlap intervals.
pub fn control_distance(a: &BoundaryControl, b: &BoundaryControl) -> f64 {
    overlaps(&a.mesh, &b.mesh)
        .into_iter()
        .map(|(lo, hi, i, j)| (hi - lo) * (a.coeffs[i] - b.coeffs[j]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `L2(Gamma)` distance of two continuous piecewise linear traces on different
/// meshes of one domain, integrated exactly over the overlap intervals.
pub fn trace_distance(a: &BoundaryTrace, b: &BoundaryTrace) -> f64 {
    let sa = boundary_arclength(&a.mesh);
    let sb = boundary_arclength(&b.mesh);
    let scale = sa.last().unwrap() / sb.last().unwrap();
    let at = |tr: &BoundaryTrace, s: &[f64], sc: f64, i: usize, x: f64| {
        let (s0, s1) = (s[i] * sc, s[i + 1] * sc);
        tr.eval_on_edge(i, ((x - s0) / (s1 - s0)).clamp(0.0, 1.0))
    };
    overlaps(&a.mesh, &b.mesh)
        .into_iter()
        .map(|(lo, hi, i, j)| {
            let d0 = at(a, &sa, 1.0, i, lo) - at(b, &sb, scale, j, lo);
            let d1 = at(a, &sa, 1.0, i, hi) - at(b, &sb, scale, j, hi);
            (hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0
        })
        .sum::<f64>()
        .sqrt()
}

/// `L2(Omega)` distance of CR functions on two meshes of one domain, by the
/// order-6 rule on the triangles of `fine`.
pub fn state_distance(coarse: &CrFunction, fine: &CrFunction) -> f64 {
    let locator = PointLocator::new(&coarse.mesh);
    let q = tri6();
    let mut s = 0.0;
    for t in 0..fine.mesh.triangles.len() {
        let ft = fine.mesh.triangle_points(t);
        for (x, b, w) in q.on_triangle(&fine.mesh, t) {
            // Nudge towards the fine centroid so points on coarse edges pick a
            // coarse triangle that overlaps this fine triangle.
            let c = [(ft[0][0] + ft[1][0] + ft[2][0]) / 3.0, (ft[0][1] + ft[1][1] + ft[2][1]) / 3.0];
            let xn = [x[0] + 1e-9 * (c[0] - x[0]), x[1] + 1e-9 * (c[1] - x[1])];
            let (ct, _) = locator.locate(xn).expect("meshes cover the same domain");
            let cb = barycentric_of(&coarse.mesh, ct, x);
            s += w * (fine.eval(t, b) - coarse.eval(ct, cb)).powi(2);
        }
    }
    s.sqrt()
}

/// `||g - P0 g||_{L2(Gamma)}` for `g = sin(2 pi s / |Gamma|)`, `s` the arclength
/// from the first cycle vertex.
pub fn p0_sanity_error(m: &Mesh) -> f64 {
    let s = boundary_arclength(m);
    let per = *s.last().unwrap();
    let g = |t: f64| (2.0 * PI * t / per).sin();
    let q = edge6();
    let mut total = 0.0;
    for i in 0..s.len() - 1 {
        let len = s[i + 1] - s[i];
        let at = |t: f64| g(s[i] + t * len);
        let mean = q.points.iter().zip(&q.weights).map(|(&t, &w)| w * at(t)).sum::<f64>();
        total += len * q.points.iter().zip(&q.weights).map(|(&t, &w)| w * (at(t) - mean).powi(2)).sum::<f64>();
    }
    total.sqrt()
}

/// Levels of a study and the reference used when the problem has no closed
/// form solution.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub levels: Vec<usize>,
    /// Defaults to the finest level plus 3.
    pub reference_level: Option<usize>,
    pub options: ControlOptions,
}

impl StudyConfig {
    pub fn new(levels: Vec<usize>) -> Self {
        StudyConfig { levels, reference_level: None, options: ControlOptions::default() }
    }
}

/// Solves `template` on each level and measures the errors against the exact
/// solution, or against a reference solve when there is none.
pub fn convergence_study(
    template: &ProblemSpec,
    family: &MeshFamily,
    config: &StudyConfig,
) -> Result<ConvergenceTable> {
    if config.levels.len() < 3 {
        return Err(Error::InvalidParameter(format!("a study needs at least 3 levels, got {}", config.levels.len())));
    }
    if config.levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("study levels must be strictly increasing".into()));
    }
    let finest = *config.levels.last().unwrap();
    let reference = match template.exact {
        Some(_) => None,
        None => {
            let level = config.reference_level.unwrap_or(finest + 3);
            if level < finest + 2 {
                return Err(Error::InvalidParameter(format!(
                    "reference level {level} must be at least the finest level plus 2 ({})",
                    finest + 2
                )));
            }
            Some(reference_solution(template, family, level).map_err(|e| Error::StudyAborted {
                level,
                source: Box::new(e),
                partial: Box::new(ConvergenceTable::default()),
            })?)
        }
    };
    let mut table = ConvergenceTable::default();
    for &level in &config.levels {
        match study_row(template, family, level, reference.as_ref(), &config.options) {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                return Err(Error::StudyAborted { level, source: Box::new(e), partial: Box::new(table) });
            }
        }
    }
    Ok(table)
}

fn study_row(
    template: &ProblemSpec,
    family: &MeshFamily,
    level: usize,
    reference: Option<&OptimalitySolution>,
    options: &ControlOptions,
) -> Result<ConvergenceRow> {
    let start = Instant::now();
    let mesh = family.level(level)?;
    let spec = template.on_mesh(mesh.clone());
    let sol = ControlProblem::new(spec)?.solve_control(options)?;
    let (control_error, state_error, flux_error) = match (&template.exact, reference) {
        (Some(ex), _) => (
            sol.control.l2_error(|x, n| (ex.control)(x, n)),
            sol.state.composite.l2_error(|x| (ex.state)(x)),
            sol.flux.l2_error(|x, n| (ex.flux)(x, n)),
        ),
        (None, Some(r)) => (
            control_distance(&sol.control, &r.control),
            state_distance(&sol.state.composite, &r.state.composite),
            trace_distance(&sol.flux, &r.flux),
        ),
        (None, None) => unreachable!("studies without closed form carry a reference"),
    };
    Ok(ConvergenceRow {
        level,
        h: mesh.h,
        boundary_edges: mesh.num_boundary_edges(),
        control_error,
        state_error,
        flux_error,
        p0_error: p0_sanity_error(&mesh),
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Random smooth data, regularization and bounds on `mesh`, bounds straddling zero.
pub fn random_instance(mesh: Arc<Mesh>, rng: &mut impl Rng) -> Result<ProblemSpec> {
    let alpha = 10f64.powf(rng.gen_range(-2.0..0.0));
    let bounds = BoxBounds::new(rng.gen_range(-1.0..-0.05), rng.gen_range(0.05..1.0))?;
    let (a, b, c, d) =
        (rng.gen_range(-20.0..20.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0));
    ProblemSpec::new(
        mesh,
        alpha,
        bounds,
        move |x| a * (PI * x[0]).sin() * (1.0 + x[1]) + b,
        move |x| c * x[0] * x[1] + d * (2.0 * x[1]).cos(),
    )
}

/// Agreement of the projected gradient solution with the dense QP oracle.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleComparison {
    pub boundary_edges: usize,
    /// `||u_pg - u_qp||_{L2(Gamma)}`.
    pub control_distance: f64,
    pub objective: f64,
    pub objective_gap: f64,
    pub kkt_residual: f64,
}

impl OracleComparison {
    pub fn within(&self, control_tol: f64, objective_rtol: f64) -> bool {
        self.control_distance <= control_tol && self.objective_gap <= objective_rtol * (1.0 + self.objective.abs())
    }
}

pub fn compare_with_oracle(spec: &ProblemSpec, options: &ControlOptions) -> Result<OracleComparison> {
    let p = ControlProblem::new(spec.clone())?;
    let sol = p.solve_control(options)?;
    let oracle = qp_oracle(spec)?;
    let oracle_control = BoundaryControl::new(spec.mesh.clone(), oracle.control)?;
    Ok(OracleComparison {
        boundary_edges: spec.mesh.num_boundary_edges(),
        control_distance: control_distance(&sol.control, &oracle_control),
        objective: sol.objective,
        objective_gap: (sol.objective - oracle.objective).abs(),
        kkt_residual: sol.kkt_residual,
    })
}

/// Largest `|a_pw(p, v - I_c v)| / (||p||_h ||v||_h)` over random broken
/// linears `p` and random interior CR functions `v`.
pub fn orthogonality_violation(mesh: &Arc<Mesh>, pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let coeffs = mesh.edges.iter().map(|e| if e.is_boundary() { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        let v = CrFunction::new(mesh.clone(), coeffs)?;
        let grads: Vec<[f64; 2]> =
            (0..mesh.triangles.len()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let d = enrichment_defect(&v, &grads)?;
        let scale = broken_energy_norm_of_gradients(mesh, &grads) * v.broken_energy_norm();
        if scale > 0.0 {
            worst = worst.max(d.abs() / scale);
        }
    }
    Ok(worst)
}

/// Operator diagnostics of one mesh level.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OperatorReport {
    pub level: usize,
    pub triangles: usize,
    pub boundary_edges: usize,
    pub orthogonality_max: f64,
    pub p1_tilde_norm: f64,
    /// Norm relative to the previous level.
    pub norm_ratio: Option<f64>,
}

pub fn operator_sweep(
    family: &MeshFamily,
    levels: usize,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<Vec<OperatorReport>> {
    let mut out: Vec<OperatorReport> = Vec::with_capacity(levels);
    for level in 0..levels {
        let m = family.level(level)?;
        let norm = p1_tilde_operator_norm(&m)?;
        out.push(OperatorReport {
            level,
            triangles: m.triangles.len(),
            boundary_edges: m.num_boundary_edges(),
            orthogonality_max: orthogonality_violation(&m, pairs, rng)?,
            p1_tilde_norm: norm,
            norm_ratio: out.last().map(|r| norm / r.p1_tilde_norm),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::interpolate_cr;

    #[test]
    fn families_have_odd_boundaries() {
        for d in [Domain::UnitSquare, Domain::Pentagon] {
            let fam = MeshFamily::new(d).unwrap();
            for k in 0..4 {
                let m = fam.level(k).unwrap();
                assert_eq!(m.num_boundary_edges() % 2, 1);
                assert!(crate::mesh::validate(&m).is_valid());
            }
        }
        assert_eq!(MeshFamily::new(Domain::UnitSquare).unwrap().level(1).unwrap().num_boundary_edges(), 17);
        assert_eq!(MeshFamily::new(Domain::Pentagon).unwrap().level(2).unwrap().num_boundary_edges(), 21);
    }

    #[test]
    fn manufactured_inactive_values() {
        let alpha = 0.5;
        let m = MeshFamily::new(Domain::UnitSquare).unwrap().level(0).unwrap();
        let p = manufactured_inactive(m, alpha).unwrap();
        let ex = p.exact.clone().unwrap();
        let mids =
            [([0.5, 0.0], [0.0, -1.0]), ([1.0, 0.5], [1.0, 0.0]), ([0.5, 1.0], [0.0, 1.0]), ([0.0, 0.5], [-1.0, 0.0])];
        for (x, n) in mids {
            assert!(((ex.control)(x, n) + PI / alpha).abs() < 1e-12);
            assert!(p.bounds.contains((ex.control)(x, n)));
        }
        for c in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] {
            assert!((ex.control)(c, [1.0, 0.0]).abs() < 1e-12 && (ex.control)(c, [0.0, 1.0]).abs() < 1e-12);
        }
    }

    #[test]
    fn manufactured_residuals_vanish() {
        // Second differences of the closed forms against the source and target.
        let alpha = 1.3;
        let m = MeshFamily::new(Domain::UnitSquare).unwrap().level(0).unwrap();
        let p = manufactured_inactive(m, alpha).unwrap();
        let ex = p.exact.clone().unwrap();
        let lap = |f: &dyn Fn(Point) -> f64, x: Point| {
            let h = 1e-4;
            (f([x[0] + h, x[1]]) + f([x[0] - h, x[1]]) + f([x[0], x[1] + h]) + f([x[0], x[1] - h]) - 4.0 * f(x))
                / (h * h)
        };
        for x in [[0.2, 0.3], [0.7, 0.1], [0.5, 0.5], [0.9, 0.8]] {
            let state = |x: Point| (ex.state)(x);
            let adj = |x: Point| (ex.adjoint)(x);
            assert!((-lap(&state, x) - (p.source)(x)).abs() < 1e-5);
            assert!((-lap(&adj, x) - ((ex.state)(x) - (p.target)(x))).abs() < 1e-5);
        }
        // Boundary values of the state equal the control.
        for (x, n) in [([0.3, 0.0], [0.0, -1.0]), ([1.0, 0.6], [1.0, 0.0])] {
            assert!(((ex.state)(x) - (ex.control)(x, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn active_problem_has_active_set() {
        let m = MeshFamily::new(Domain::UnitSquare).unwrap().level(1).unwrap();
        let p = manufactured_active(m, 1.0, 0.5).unwrap();
        let sol = ControlProblem::new(p.clone()).unwrap().solve_control(&ControlOptions::default()).unwrap();
        assert!(sol.active_count(&p.bounds, 1e-12) > 0);
        assert!(sol.control.coeffs.iter().all(|&u| p.bounds.contains(u)));
    }

    #[test]
    fn cross_mesh_distances_are_consistent() {
        let fam = MeshFamily::new(Domain::UnitSquare).unwrap();
        let (a, b) = (fam.level(0).unwrap(), fam.level(2).unwrap());
        let g = |x: Point, _: [f64; 2]| x[0] - 2.0 * x[1] * x[1];
        let ua = crate::control_ops::p0_project_fn(a.clone(), g);
        let ub = crate::control_ops::p0_project_fn(b.clone(), g);
        assert!(control_distance(&ua, &ua) == 0.0);
        // Symmetric, and a constant offset c gives c sqrt(|Gamma|).
        assert!((control_distance(&ua, &ub) - control_distance(&ub, &ua)).abs() < 1e-14);
        let shifted = BoundaryControl::new(a.clone(), ua.coeffs.iter().map(|c| c + 0.5).collect()).unwrap();
        assert!((control_distance(&ua, &shifted) - 0.5 * 2.0).abs() < 1e-14);

        let ta = crate::fespace::BoundaryTrace::new(
            a.clone(),
            a.boundary_vertices.iter().map(|&v| a.position(v)[0]).collect(),
        )
        .unwrap();
        let tb = crate::fespace::BoundaryTrace::new(
            b.clone(),
            b.boundary_vertices.iter().map(|&v| b.position(v)[0]).collect(),
        )
        .unwrap();
        assert!(trace_distance(&ta, &tb) < 1e-14);
        assert!((trace_distance(&ta, &ta) - 0.0).abs() < 1e-15);

        let fa = interpolate_cr(a.clone(), |x| 3.0 * x[0] - x[1]);
        let fb = interpolate_cr(b.clone(), |x| 3.0 * x[0] - x[1]);
        assert!(state_distance(&fa, &fb) < 1e-12);
    }

    #[test]
    fn p0_sanity_rate() {
        let fam = MeshFamily::new(Domain::UnitSquare).unwrap();
        let e: Vec<f64> = (0..4).map(|k| p0_sanity_error(&fam.uniform_level(k).unwrap())).collect();
        for w in e.windows(2) {
            assert!(((w[0] / w[1]).log2() - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn study_rejects_short_level_lists() {
        let fam = MeshFamily::new(Domain::UnitSquare).unwrap();
        let p = manufactured_inactive(fam.level(0).unwrap(), 1.0).unwrap();
        assert!(convergence_study(&p, &fam, &StudyConfig::new(vec![0, 1])).is_err());
    }
}
