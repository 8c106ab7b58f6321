//! Crouzeix-Raviart discretization of Dirichlet boundary control for the
//! Poisson equation with pointwise control constraints.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assembly;
pub mod control_ops;
pub mod error;
pub mod fespace;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod optimizer;

pub use control_ops::BoxBounds;
pub use error::{Error, Result};
pub use fespace::{BoundaryControl, BoundaryTrace, CrFunction, W1Function};
pub use mesh::Mesh;
pub use optimizer::{ControlOptions, ControlProblem, OptimalitySolution, ProblemSpec, StateSolution};
