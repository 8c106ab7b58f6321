//! Discrete function spaces on a [`Mesh`].
//!
//! * [`CrFunction`]: Crouzeix-Raviart functions, one edge-mean coefficient per edge.
//! * [`W1Function`]: continuous piecewise linears, one value per vertex.
//! * [`BoundaryControl`]: piecewise constants on the boundary, one value per cycle edge.
//! * [`BoundaryTrace`]: continuous piecewise linears on the boundary, one value per cycle vertex.
//! * [`EnrichedFunction`]: the conforming quadratic obtained from [`enrich`].
//!
//! The local CR basis on a triangle is `phi_i = 1 - 2 lambda_i`, attached to
//! the edge opposite vertex `i`; its mean over edge `j` is `delta_ij`.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Quadrature rule on the reference triangle in barycentric coordinates.
/// Weights sum to one; multiply by the triangle area.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub order: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    /// Physical nodes and weights on triangle `t`; the weights sum to `|T|`.
    pub fn on_triangle(&self, mesh: &Mesh, t: usize) -> impl Iterator<Item = (Point, [f64; 3], f64)> + '_ {
        let area = mesh.triangles[t].area;
        let p = mesh.triangle_points(t);
        self.points.iter().zip(&self.weights).map(move |(b, w)| {
            let x =
                [b[0] * p[0][0] + b[1] * p[1][0] + b[2] * p[2][0], b[0] * p[0][1] + b[1] * p[1][1] + b[2] * p[2][1]];
            (x, *b, w * area)
        })
    }
}

/// Gauss-Legendre rule on `[0, 1]`; weights sum to one.
#[derive(Debug, Clone)]
pub struct EdgeRule {
    pub order: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EdgeRule {
    /// Physical nodes and weights on the segment `a -> b`; the weights sum to `|b - a|`.
    pub fn on_segment(&self, a: Point, b: Point) -> impl Iterator<Item = (Point, f64, f64)> + '_ {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        self.points
            .iter()
            .zip(&self.weights)
            .map(move |(&s, &w)| ([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])], s, w * len))
    }
}

fn orbit3(a: f64, w: f64, pts: &mut Vec<[f64; 3]>, wts: &mut Vec<f64>) {
    let b = 1.0 - 2.0 * a;
    for p in [[b, a, a], [a, b, a], [a, a, b]] {
        pts.push(p);
        wts.push(w);
    }
}

fn orbit6(a: f64, b: f64, w: f64, pts: &mut Vec<[f64; 3]>, wts: &mut Vec<f64>) {
    let c = 1.0 - a - b;
    for p in [[a, b, c], [b, a, c], [a, c, b], [c, a, b], [b, c, a], [c, b, a]] {
        pts.push(p);
        wts.push(w);
    }
}

/// Symmetric triangle rules exact for polynomials of degree 2, 4 and 6
/// (3, 6 and 12 points).
pub fn quadrature_triangle(order: usize) -> Result<&'static TriangleRule> {
    static RULES: OnceLock<[TriangleRule; 3]> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        let mut p2 = (Vec::new(), Vec::new());
        orbit3(1.0 / 6.0, 1.0 / 3.0, &mut p2.0, &mut p2.1);

        let mut p4 = (Vec::new(), Vec::new());
        orbit3(0.445_948_490_915_965, 0.223_381_589_678_011, &mut p4.0, &mut p4.1);
        orbit3(0.091_576_213_509_771, 0.109_951_743_655_322, &mut p4.0, &mut p4.1);

        let mut p6 = (Vec::new(), Vec::new());
        orbit3(0.249_286_745_170_910, 0.116_786_275_726_379, &mut p6.0, &mut p6.1);
        orbit3(0.063_089_014_491_502, 0.050_844_906_370_207, &mut p6.0, &mut p6.1);
        orbit6(0.053_145_049_844_817, 0.310_352_451_033_784, 0.082_851_075_618_374, &mut p6.0, &mut p6.1);

        let mk = |order, (points, weights): (Vec<[f64; 3]>, Vec<f64>)| {
            // Renormalise the tabulated weights so that constants are exact to roundoff.
            let s: f64 = weights.iter().sum();
            TriangleRule { order, points, weights: weights.into_iter().map(|w| w / s).collect() }
        };
        [mk(2, p2), mk(4, p4), mk(6, p6)]
    });
    match order {
        2 => Ok(&rules[0]),
        4 => Ok(&rules[1]),
        6 => Ok(&rules[2]),
        o => Err(Error::UnsupportedQuadratureOrder(o)),
    }
}

/// Gauss-Legendre edge rules of order 2, 4 and 6 with 1, 2 and 3 points
/// (exact for degree 1, 3 and 5).
pub fn quadrature_edge(order: usize) -> Result<&'static EdgeRule> {
    static RULES: OnceLock<[EdgeRule; 3]> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        let g2 = 3f64.sqrt() / 6.0;
        let g3 = 0.6f64.sqrt() / 2.0;
        [
            EdgeRule { order: 2, points: vec![0.5], weights: vec![1.0] },
            EdgeRule { order: 4, points: vec![0.5 - g2, 0.5 + g2], weights: vec![0.5, 0.5] },
            EdgeRule {
                order: 6,
                points: vec![0.5 - g3, 0.5, 0.5 + g3],
                weights: vec![5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0],
            },
        ]
    });
    match order {
        2 => Ok(&rules[0]),
        4 => Ok(&rules[1]),
        6 => Ok(&rules[2]),
        o => Err(Error::UnsupportedQuadratureOrder(o)),
    }
}

pub(crate) fn tri6() -> &'static TriangleRule {
    quadrature_triangle(6).expect("order 6 is tabulated")
}

pub(crate) fn edge6() -> &'static EdgeRule {
    quadrature_edge(6).expect("order 6 is tabulated")
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Crouzeix-Raviart function: coefficient `e` is the mean of the function over edge `e`.
#[derive(Debug, Clone)]
pub struct CrFunction {
    pub mesh: Arc<Mesh>,
    pub coeffs: Vec<f64>,
}

impl CrFunction {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(mesh.edges.len(), coeffs.len())?;
        Ok(CrFunction { mesh, coeffs })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.edges.len();
        CrFunction { mesh, coeffs: vec![0.0; n] }
    }

    /// Value on triangle `t` at barycentric coordinates `bary`.
    pub fn eval(&self, t: usize, bary: [f64; 3]) -> f64 {
        eval_cr(self, t, bary)
    }

    /// Constant gradient on triangle `t`.
    pub fn gradient(&self, t: usize) -> [f64; 2] {
        let g = self.mesh.barycentric_gradients(t);
        let e = self.mesh.triangles[t].edges;
        let mut out = [0.0; 2];
        for i in 0..3 {
            out[0] -= 2.0 * self.coeffs[e[i]] * g[i][0];
            out[1] -= 2.0 * self.coeffs[e[i]] * g[i][1];
        }
        out
    }

    /// Value of the restriction to triangle `t` at its local vertex `j`.
    pub fn vertex_value(&self, t: usize, j: usize) -> f64 {
        let e = self.mesh.triangles[t].edges;
        e.iter().enumerate().map(|(i, &ei)| if i == j { -self.coeffs[ei] } else { self.coeffs[ei] }).sum()
    }

    /// Largest absolute boundary-edge coefficient, with its edge id.
    pub fn max_boundary_coeff(&self) -> (usize, f64) {
        self.mesh.boundary_cycle.iter().map(|&e| (e, self.coeffs[e])).fold((usize::MAX, 0.0), |best, cur| {
            if cur.1.abs() > best.1.abs() {
                cur
            } else {
                best
            }
        })
    }

    /// Broken energy seminorm `sqrt(a_pw(v, v))`.
    pub fn broken_energy_norm(&self) -> f64 {
        (0..self.mesh.triangles.len())
            .map(|t| {
                let g = self.gradient(t);
                self.mesh.triangles[t].area * (g[0] * g[0] + g[1] * g[1])
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `||f - v||_{L2}` by order-6 quadrature.
    pub fn l2_error(&self, f: impl Fn(Point) -> f64) -> f64 {
        let q = tri6();
        let mut s = 0.0;
        for t in 0..self.mesh.triangles.len() {
            for (x, b, w) in q.on_triangle(&self.mesh, t) {
                s += w * (f(x) - self.eval(t, b)).powi(2);
            }
        }
        s.sqrt()
    }

    /// Broken `H1` seminorm error against an exact gradient.
    pub fn broken_energy_error(&self, grad: impl Fn(Point) -> [f64; 2]) -> f64 {
        let q = tri6();
        let mut s = 0.0;
        for t in 0..self.mesh.triangles.len() {
            let g = self.gradient(t);
            for (x, _, w) in q.on_triangle(&self.mesh, t) {
                let e = grad(x);
                s += w * ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2));
            }
        }
        s.sqrt()
    }
}

/// Evaluates `v` on triangle `t` at barycentric point `bary`.
pub fn eval_cr(v: &CrFunction, t: usize, bary: [f64; 3]) -> f64 {
    let e = v.mesh.triangles[t].edges;
    (0..3).map(|i| v.coeffs[e[i]] * (1.0 - 2.0 * bary[i])).sum()
}

/// CR interpolant: each coefficient is the edge mean of `f`, by 3-point Gauss.
pub fn interpolate_cr(mesh: Arc<Mesh>, f: impl Fn(Point) -> f64) -> CrFunction {
    let q = edge6();
    let coeffs = mesh
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (mesh.position(e.endpoints[0]), mesh.position(e.endpoints[1]));
            q.on_segment(a, b).map(|(x, _, w)| w * f(x)).sum::<f64>() / e.length
        })
        .collect();
    CrFunction { mesh, coeffs }
}

/// Continuous piecewise linear function, one value per vertex.
#[derive(Debug, Clone)]
pub struct W1Function {
    pub mesh: Arc<Mesh>,
    pub coeffs: Vec<f64>,
}

impl W1Function {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(mesh.vertices.len(), coeffs.len())?;
        Ok(W1Function { mesh, coeffs })
    }

    pub fn eval(&self, t: usize, bary: [f64; 3]) -> f64 {
        let v = self.mesh.triangles[t].vertices;
        (0..3).map(|i| bary[i] * self.coeffs[v[i]]).sum()
    }

    /// The same function in the CR basis (edge means are endpoint averages).
    pub fn to_cr(&self) -> CrFunction {
        let coeffs =
            self.mesh.edges.iter().map(|e| 0.5 * (self.coeffs[e.endpoints[0]] + self.coeffs[e.endpoints[1]])).collect();
        CrFunction { mesh: self.mesh.clone(), coeffs }
    }

    /// Restriction to the boundary.
    pub fn trace(&self) -> BoundaryTrace {
        let coeffs = self.mesh.boundary_vertices.iter().map(|&v| self.coeffs[v]).collect();
        BoundaryTrace { mesh: self.mesh.clone(), coeffs }
    }
}

/// Piecewise constant boundary function; coefficient `i` lives on cycle edge `i`.
#[derive(Debug, Clone)]
pub struct BoundaryControl {
    pub mesh: Arc<Mesh>,
    pub coeffs: Vec<f64>,
}

impl BoundaryControl {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(mesh.num_boundary_edges(), coeffs.len())?;
        Ok(BoundaryControl { mesh, coeffs })
    }

    pub fn constant(mesh: Arc<Mesh>, c: f64) -> Self {
        let n = mesh.num_boundary_edges();
        BoundaryControl { mesh, coeffs: vec![c; n] }
    }

    /// `L2(Gamma)` norm.
    pub fn l2_norm(&self) -> f64 {
        self.mesh.boundary_lengths().iter().zip(&self.coeffs).map(|(l, c)| l * c * c).sum::<f64>().sqrt()
    }

    /// `||g - u||_{L2(Gamma)}` for a boundary function `g(x, outward normal)`.
    pub fn l2_error(&self, g: impl Fn(Point, [f64; 2]) -> f64) -> f64 {
        let q = edge6();
        let mut s = 0.0;
        for i in 0..self.coeffs.len() {
            let (a, b) = self.mesh.boundary_segment(i);
            let n = self.mesh.boundary_normal(i);
            s += q.on_segment(a, b).map(|(x, _, w)| w * (g(x, n) - self.coeffs[i]).powi(2)).sum::<f64>();
        }
        s.sqrt()
    }
}

/// Continuous piecewise linear boundary function; coefficient `i` is the
/// value at cycle vertex `i`.
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    pub mesh: Arc<Mesh>,
    pub coeffs: Vec<f64>,
}

impl BoundaryTrace {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(mesh.boundary_vertices.len(), coeffs.len())?;
        Ok(BoundaryTrace { mesh, coeffs })
    }

    /// Value on cycle edge `i` at local parameter `s` in `[0, 1]`.
    pub fn eval_on_edge(&self, i: usize, s: f64) -> f64 {
        let n = self.coeffs.len();
        (1.0 - s) * self.coeffs[i] + s * self.coeffs[(i + 1) % n]
    }

    pub fn l2_norm(&self) -> f64 {
        let l = self.mesh.boundary_lengths();
        let n = self.coeffs.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.coeffs[i], self.coeffs[(i + 1) % n]);
                l[i] * (a * a + a * b + b * b) / 3.0
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_error(&self, g: impl Fn(Point, [f64; 2]) -> f64) -> f64 {
        let q = edge6();
        let mut s = 0.0;
        for i in 0..self.coeffs.len() {
            let (a, b) = self.mesh.boundary_segment(i);
            let n = self.mesh.boundary_normal(i);
            s += q.on_segment(a, b).map(|(x, t, w)| w * (g(x, n) - self.eval_on_edge(i, t)).powi(2)).sum::<f64>();
        }
        s.sqrt()
    }
}

/// Extension of a boundary trace by zero at the interior vertices.
pub fn tilde_extension(z: &BoundaryTrace) -> W1Function {
    let mut coeffs = vec![0.0; z.mesh.vertices.len()];
    for (i, &v) in z.mesh.boundary_vertices.iter().enumerate() {
        coeffs[v] = z.coeffs[i];
    }
    W1Function { mesh: z.mesh.clone(), coeffs }
}

/// Conforming piecewise quadratic with vertex values and edge means as degrees of freedom.
#[derive(Debug, Clone)]
pub struct EnrichedFunction {
    pub mesh: Arc<Mesh>,
    pub vertex_values: Vec<f64>,
    pub edge_means: Vec<f64>,
}

impl EnrichedFunction {
    /// Six nodal values on triangle `t`: three vertices, then the midpoints
    /// of the edges opposite vertices 0, 1, 2.
    pub fn local_nodal(&self, t: usize) -> [f64; 6] {
        let tri = &self.mesh.triangles[t];
        let q = tri.vertices.map(|v| self.vertex_values[v]);
        let mut out = [q[0], q[1], q[2], 0.0, 0.0, 0.0];
        for i in 0..3 {
            let (a, b) = (q[(i + 1) % 3], q[(i + 2) % 3]);
            // Simpson is exact for quadratics: mean = (q_a + 4 q_mid + q_b) / 6.
            out[3 + i] = (6.0 * self.edge_means[tri.edges[i]] - a - b) / 4.0;
        }
        out
    }

    pub fn eval(&self, t: usize, bary: [f64; 3]) -> f64 {
        let n = self.local_nodal(t);
        let l = bary;
        let mut s = 0.0;
        for i in 0..3 {
            s += n[i] * l[i] * (2.0 * l[i] - 1.0);
            s += n[3 + i] * 4.0 * l[(i + 1) % 3] * l[(i + 2) % 3];
        }
        s
    }

    pub fn gradient(&self, t: usize, bary: [f64; 3]) -> [f64; 2] {
        let n = self.local_nodal(t);
        let g = self.mesh.barycentric_gradients(t);
        let l = bary;
        let mut out = [0.0; 2];
        for i in 0..3 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            for d in 0..2 {
                out[d] += n[i] * (4.0 * l[i] - 1.0) * g[i][d];
                out[d] += n[3 + i] * 4.0 * (l[j] * g[k][d] + l[k] * g[j][d]);
            }
        }
        out
    }
}

/// Enrichment of a function in the interior CR space into the conforming
/// quadratic space: interior vertex values are averages of the neighbouring
/// triangle values, boundary vertex values are zero, edge means are kept.
pub fn enrich(v: &CrFunction) -> Result<EnrichedFunction> {
    let mesh = &v.mesh;
    let (edge, value) = v.max_boundary_coeff();
    let scale = v.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if value.abs() > 1e-14 * scale.max(1.0) {
        return Err(Error::NotInInteriorSpace { edge, value });
    }
    let mut sum = vec![0.0; mesh.vertices.len()];
    let mut count = vec![0usize; mesh.vertices.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for j in 0..3 {
            sum[tri.vertices[j]] += v.vertex_value(t, j);
            count[tri.vertices[j]] += 1;
        }
    }
    let vertex_values =
        mesh.vertices.iter().map(|p| if p.on_boundary { 0.0 } else { sum[p.id] / count[p.id] as f64 }).collect();
    Ok(EnrichedFunction { mesh: mesh.clone(), vertex_values, edge_means: v.coeffs.clone() })
}

/// `a_pw(p, v - I_c v)` for the broken piecewise linear `p` given by its
/// gradient on each triangle.
pub fn enrichment_defect(v: &CrFunction, p_gradients: &[[f64; 2]]) -> Result<f64> {
    let mesh = &v.mesh;
    check_len(mesh.triangles.len(), p_gradients.len())?;
    let ic = enrich(v)?;
    let q = quadrature_triangle(2)?;
    let mut s = 0.0;
    for (t, gp) in p_gradients.iter().enumerate() {
        let gv = v.gradient(t);
        for (_, b, w) in q.on_triangle(mesh, t) {
            let gi = ic.gradient(t, b);
            s += w * (gp[0] * (gv[0] - gi[0]) + gp[1] * (gv[1] - gi[1]));
        }
    }
    Ok(s)
}

/// Broken energy norm of a piecewise linear function from its gradients.
pub fn broken_energy_norm_of_gradients(mesh: &Mesh, p_gradients: &[[f64; 2]]) -> f64 {
    p_gradients.iter().zip(&mesh.triangles).map(|(g, t)| t.area * (g[0] * g[0] + g[1] * g[1])).sum::<f64>().sqrt()
}

/// Jump of a CR function across interior edge `e` at local parameter `s`
/// (value from the first incident triangle minus the second). Test utility.
pub fn jump_at(v: &CrFunction, e: usize, s: f64) -> Option<f64> {
    let edge = &v.mesh.edges[e];
    let t2 = edge.triangles.1?;
    let (a, b) = (v.mesh.position(edge.endpoints[0]), v.mesh.position(edge.endpoints[1]));
    let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
    let val = |t: usize| v.eval(t, barycentric_of(&v.mesh, t, x));
    Some(val(edge.triangles.0) - val(t2))
}

/// Barycentric coordinates of `x` with respect to triangle `t`.
pub fn barycentric_of(mesh: &Mesh, t: usize, x: Point) -> [f64; 3] {
    let p = mesh.triangle_points(t);
    let d = mesh.signed_double_area(t);
    let c = |o: Point, a: Point, b: Point| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let l1 = c(p[0], x, p[2]) / d;
    let l2 = c(p[0], p[1], x) / d;
    [1.0 - l1 - l2, l1, l2]
}
