use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("polygon is not strictly convex and counterclockwise at corner {corner}")]
    NonConvexPolygon { corner: usize },

    #[error("degenerate triangle {triangle}: area {area:e}")]
    DegenerateTriangle { triangle: usize, area: f64 },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error(
        "boundary has {edges} edges; the P0 transfer matrix is singular for an even count \
         (apply ensure_odd_boundary to the mesh)"
    )]
    EvenBoundary { edges: usize },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("function is not in the interior space: boundary edge {edge} has coefficient {value:e}")]
    NotInInteriorSpace { edge: usize, value: f64 },

    #[error("unsupported quadrature order {0} (supported: 2, 4, 6)")]
    UnsupportedQuadratureOrder(usize),

    #[error("invalid bounds: lower {lower} must be strictly below upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("projected gradient stopped after {iterations} iterations with KKT residual {residual:e}")]
    ControlNotConverged { iterations: usize, residual: f64, last_control: Vec<f64> },

    #[error("QP oracle refuses {edges} boundary edges (limit {limit})")]
    OracleTooLarge { edges: usize, limit: usize },

    #[error("study aborted at level {level}: {source}")]
    StudyAborted {
        level: usize,
        #[source]
        source: Box<Error>,
        partial: Box<crate::harness::ConvergenceTable>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
