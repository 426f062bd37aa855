use thiserror::Error;

/// Crate-wide error type.
///
/// Validation messages report states 1-indexed; files store them 0-indexed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse model file: {0}")]
    Parse(String),

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error("degenerate mass: entries sum to {total}, need > 0.5")]
    DegenerateMass { total: f64 },

    #[error("time-grid mismatch: {0}")]
    GridMismatch(String),

    #[error("optimality polytope vertex cap exceeded: {0}")]
    CapExceeded(String),

    #[error(
        "selector residual {residual:.3e} exceeds guard {guard:.3e} at t = {t}; \
         the field does not admit a consistent optimal drift here"
    )]
    SelectorResidual { residual: f64, guard: f64, t: f64 },

    #[error("field node is flagged multivalued at {0}; construction requires single-valued nodes")]
    MultivaluedNode(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
