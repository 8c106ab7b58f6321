//! Boundary transfer operators between controls and traces, and the box projection.

use std::sync::Arc;

use crate::assembly::{assemble_boundary_mass, assemble_p0_matrix};
use crate::error::{Error, Result};
use crate::fespace::{edge6, BoundaryControl, BoundaryTrace};
use crate::linalg::{cyclic_bidiagonal_solve, cyclic_bidiagonal_solve_transpose, dense_eig_max, DenseMatrix};
use crate::mesh::{Mesh, Point};

/// Pointwise control bounds `u_a <= u <= u_b`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxBounds {
    pub u_a: f64,
    pub u_b: f64,
}

impl BoxBounds {
    pub fn new(u_a: f64, u_b: f64) -> Result<Self> {
        if !(u_a < u_b) {
            return Err(Error::InvalidBounds { lower: u_a, upper: u_b });
        }
        Ok(BoxBounds { u_a, u_b })
    }

    pub fn clamp(&self, w: f64) -> f64 {
        self.u_b.min(self.u_a.max(w))
    }

    pub fn contains(&self, w: f64) -> bool {
        self.u_a <= w && w <= self.u_b
    }
}

/// Componentwise `min(u_b, max(u_a, w))`.
pub fn clamp_box(w: &[f64], bounds: &BoxBounds) -> Vec<f64> {
    w.iter().map(|&v| bounds.clamp(v)).collect()
}

pub fn clamp_control(w: &BoundaryControl, bounds: &BoxBounds) -> BoundaryControl {
    BoundaryControl { mesh: w.mesh.clone(), coeffs: clamp_box(&w.coeffs, bounds) }
}

pub fn clamp_trace(w: &BoundaryTrace, bounds: &BoxBounds) -> BoundaryTrace {
    BoundaryTrace { mesh: w.mesh.clone(), coeffs: clamp_box(&w.coeffs, bounds) }
}

/// Edge means of a boundary function `g(x, outward normal)`.
pub fn p0_project_fn(mesh: Arc<Mesh>, g: impl Fn(Point, [f64; 2]) -> f64) -> BoundaryControl {
    let q = edge6();
    let coeffs = (0..mesh.num_boundary_edges())
        .map(|i| {
            let (a, b) = mesh.boundary_segment(i);
            let n = mesh.boundary_normal(i);
            let len = mesh.edges[mesh.boundary_cycle[i]].length;
            q.on_segment(a, b).map(|(x, _, w)| w * g(x, n)).sum::<f64>() / len
        })
        .collect();
    BoundaryControl { mesh, coeffs }
}

/// Edge means of a continuous piecewise linear trace.
pub fn p0_project(z: &BoundaryTrace) -> BoundaryControl {
    let n = z.coeffs.len();
    let coeffs = (0..n).map(|i| 0.5 * (z.coeffs[i] + z.coeffs[(i + 1) % n])).collect();
    BoundaryControl { mesh: z.mesh.clone(), coeffs }
}

fn check_odd(n: usize) -> Result<()> {
    if n.is_multiple_of(2) {
        return Err(Error::EvenBoundary { edges: n });
    }
    Ok(())
}

/// Inverse of the edge-mean map on raw coefficients.
pub fn p1_tilde_coeffs(u: &[f64]) -> Result<Vec<f64>> {
    check_odd(u.len())?;
    let half = vec![0.5; u.len()];
    cyclic_bidiagonal_solve(&half, &half, u)
}

/// Transpose of [`p1_tilde_coeffs`].
pub fn p1_tilde_transpose_coeffs(r: &[f64]) -> Result<Vec<f64>> {
    check_odd(r.len())?;
    let half = vec![0.5; r.len()];
    cyclic_bidiagonal_solve_transpose(&half, &half, r)
}

/// The unique continuous piecewise linear trace whose edge means are `u`.
pub fn p1_tilde(u: &BoundaryControl) -> Result<BoundaryTrace> {
    Ok(BoundaryTrace { mesh: u.mesh.clone(), coeffs: p1_tilde_coeffs(&u.coeffs)? })
}

/// `L2(Gamma) -> L2(Gamma)` norm of the inverse edge-mean map, from the dense
/// generalized eigenproblem `B^-T M_Gamma B^-1 x = lambda D x`.
pub fn p1_tilde_operator_norm(m: &Mesh) -> Result<f64> {
    let n = m.num_boundary_edges();
    check_odd(n)?;
    let b = assemble_p0_matrix(m).to_dense();
    let binv = crate::linalg::dense_inverse(&b)?;
    let mg = assemble_boundary_mass(m).to_dense();
    let s = binv.transpose().matmul(&mg).matmul(&binv);
    let dinv_sqrt: Vec<f64> = m.boundary_lengths().iter().map(|l| 1.0 / l.sqrt()).collect();
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = dinv_sqrt[i] * s[(i, j)] * dinv_sqrt[j];
        }
    }
    Ok(dense_eig_max(&c)?.sqrt())
}
