//! Assembly of the discrete bilinear forms and load vectors.

use crate::error::{Error, Result};
use crate::fespace::quadrature_triangle;
use crate::linalg::SparseMatrix;
use crate::mesh::{Mesh, Point};

/// Local CR stiffness `4 |T| grad(lambda_i) . grad(lambda_j)`, row `i` for the
/// edge opposite vertex `i`.
pub fn local_stiffness(m: &Mesh, t: usize) -> [[f64; 3]; 3] {
    let g = m.barycentric_gradients(t);
    let area = m.triangles[t].area;
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = 4.0 * area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    k
}

/// Broken stiffness `a_pw(phi_e, phi_f)` over all edges.
pub fn assemble_stiffness(m: &Mesh) -> Result<SparseMatrix> {
    let mut trip = Vec::with_capacity(9 * m.triangles.len());
    for (t, tri) in m.triangles.iter().enumerate() {
        if tri.area <= 1e-14 * m.h * m.h {
            return Err(Error::DegenerateTriangle { triangle: t, area: tri.area });
        }
        let k = local_stiffness(m, t);
        for i in 0..3 {
            for j in 0..3 {
                trip.push((tri.edges[i], tri.edges[j], k[i][j]));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(m.edges.len(), m.edges.len(), trip))
}

/// CR mass matrix. The local basis is `L2(T)`-orthogonal with `int phi_i^2 = |T| / 3`,
/// so the global matrix is diagonal.
pub fn assemble_mass(m: &Mesh) -> SparseMatrix {
    let trip = m.triangles.iter().flat_map(|t| t.edges.iter().map(move |&e| (e, e, t.area / 3.0))).collect();
    SparseMatrix::from_triplets(m.edges.len(), m.edges.len(), trip)
}

/// Load vector `(f, phi_e)` by the degree-4 triangle rule.
pub fn assemble_load(m: &Mesh, f: impl Fn(Point) -> f64) -> Vec<f64> {
    let q = quadrature_triangle(4).expect("order 4 is tabulated");
    let mut load = vec![0.0; m.edges.len()];
    for (t, tri) in m.triangles.iter().enumerate() {
        for (x, b, w) in q.on_triangle(m, t) {
            let fx = f(x) * w;
            for i in 0..3 {
                load[tri.edges[i]] += fx * (1.0 - 2.0 * b[i]);
            }
        }
    }
    load
}

/// Boundary mass on continuous piecewise linears, in cycle-vertex order.
/// Each boundary edge of length `L` contributes `L/6 [[2, 1], [1, 2]]`.
pub fn assemble_boundary_mass(m: &Mesh) -> SparseMatrix {
    let n = m.boundary_vertices.len();
    let mut trip = Vec::with_capacity(4 * n);
    for (i, &e) in m.boundary_cycle.iter().enumerate() {
        let l = m.edges[e].length;
        let j = (i + 1) % n;
        trip.push((i, i, l / 3.0));
        trip.push((j, j, l / 3.0));
        trip.push((i, j, l / 6.0));
        trip.push((j, i, l / 6.0));
    }
    SparseMatrix::from_triplets(n, n, trip)
}

/// Matrix of the `L2(Gamma)` projection from boundary traces onto piecewise
/// constants: row `i` holds `1/2` at cycle vertices `i` and `i + 1`.
pub fn assemble_p0_matrix(m: &Mesh) -> SparseMatrix {
    let n = m.boundary_vertices.len();
    let trip = (0..n).flat_map(|i| [(i, i, 0.5), (i, (i + 1) % n, 0.5)]).collect();
    SparseMatrix::from_triplets(n, n, trip)
}

/// Maps boundary-vertex values to the CR coefficients of their extension by
/// zero (an edge mean is the average of its two endpoint values).
pub fn assemble_extension_matrix(m: &Mesh) -> SparseMatrix {
    let mut bindex = vec![usize::MAX; m.vertices.len()];
    for (i, &v) in m.boundary_vertices.iter().enumerate() {
        bindex[v] = i;
    }
    let mut trip = Vec::new();
    for e in &m.edges {
        for &v in &e.endpoints {
            if bindex[v] != usize::MAX {
                trip.push((e.id, bindex[v], 0.5));
            }
        }
    }
    SparseMatrix::from_triplets(m.edges.len(), m.boundary_vertices.len(), trip)
}

/// All matrices needed by the state, adjoint and control operators.
#[derive(Debug, Clone)]
pub struct AssembledForms {
    /// `a_pw` on the full CR space.
    pub stiffness: SparseMatrix,
    /// Interior edge ids; position `k` is interior unknown `k`.
    pub interior_edges: Vec<usize>,
    /// Restriction of the stiffness to interior edges.
    pub stiffness_interior: SparseMatrix,
    pub mass: SparseMatrix,
    pub boundary_mass: SparseMatrix,
    pub p0: SparseMatrix,
    /// Boundary edge lengths, the diagonal of the piecewise-constant mass.
    pub control_metric: Vec<f64>,
    pub extension: SparseMatrix,
}

impl AssembledForms {
    pub fn new(m: &Mesh) -> Result<Self> {
        let stiffness = assemble_stiffness(m)?;
        let interior_edges = m.interior_edges();
        let stiffness_interior = stiffness.select(&interior_edges, &interior_edges);
        Ok(AssembledForms {
            stiffness,
            interior_edges,
            stiffness_interior,
            mass: assemble_mass(m),
            boundary_mass: assemble_boundary_mass(m),
            p0: assemble_p0_matrix(m),
            control_metric: m.boundary_lengths(),
            extension: assemble_extension_matrix(m),
        })
    }

    pub fn restrict_to_interior(&self, full: &[f64]) -> Vec<f64> {
        self.interior_edges.iter().map(|&e| full[e]).collect()
    }

    /// Full coefficient vector with zeros on boundary edges.
    pub fn prolong_interior(&self, interior: &[f64], n_edges: usize) -> Vec<f64> {
        let mut full = vec![0.0; n_edges];
        for (k, &e) in self.interior_edges.iter().enumerate() {
            full[e] = interior[k];
        }
        full
    }
}
