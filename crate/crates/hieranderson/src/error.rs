use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid construction parameters.
    #[error("validation error: {0}")]
    Validation(String),

    /// An index or rank outside the materialized range.
    #[error("range error: {0}")]
    Range(String),

    /// No admissible value exists for the requested inputs.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configured resource cap was exceeded.
    #[error("resource error: {0}")]
    Resource(String),

    /// Temple precondition violated; carries the deficit E1 - <psi, A psi>.
    #[error("temple precondition violated: trial energy falls short of E1 by {deficit}")]
    TemplePrecondition { deficit: f64 },

    /// Iterative eigensolver failed to reach the requested residual.
    #[error("no convergence after {iterations} iterations, residual {residual}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
