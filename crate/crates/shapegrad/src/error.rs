//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    MeshParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("cell {cell} is degenerate after mesh move (signed area {area:.3e})")]
    DegenerateCell { cell: usize, area: f64 },

    #[error("no boundary facet carries marker {marker}")]
    MarkerNotFound { marker: i32 },

    #[error("marked facet {0:?} is not a boundary edge")]
    DanglingMarker([usize; 2]),

    #[error("shape mismatch in expression: {0}")]
    Shape(String),

    #[error("form arity error: {0}")]
    Arity(String),

    #[error("shape derivatives of facet integrals are not supported")]
    FacetShapeDerivative,

    #[error(
        "Dirichlet value depends on the spatial coordinate on a moving boundary \
         (marker {marker}); only constant values may be prescribed there"
    )]
    CoordinateBcOnMovingBoundary { marker: i32 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("functions live on different meshes or spaces: {0}")]
    SpaceMismatch(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("optimization failed: {0}")]
    Optimize(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
