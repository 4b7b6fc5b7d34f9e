//! Error taxonomy shared by all modules.

use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure
/// classes the operations can report.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Incompatible matrix/vector extents.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Operand has the wrong rank (e.g. a vector where a matrix is needed).
    #[error("rank error: {0}")]
    Rank(String),

    /// A matrix required to be positive definite failed a Cholesky pivot.
    #[error("matrix not positive definite (pivot {pivot}: {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// An iterative routine exhausted its budget without converging.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid scalar argument (negative damping, decay out of range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A layer kind or loss kind the requested operation does not support.
    #[error("unsupported capability: {0}")]
    Capability(String),

    /// Model/batch/experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Edge/node index structure of a graph input is inconsistent.
    #[error("graph structure error: {0}")]
    GraphStructure(String),

    /// Optimizer state violated its freshness contract.
    #[error("internal consistency error: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;
