//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, numerics, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions of the inputs do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violates a precondition (non-positive scale, empty sum, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization failed even after jitter escalation.
    #[error("matrix is not positive semi-definite (min eigenvalue ~ {min_eigenvalue:.3e}, tried jitter up to {max_jitter:.3e})")]
    NotPsd {
        min_eigenvalue: f64,
        max_jitter: f64,
    },

    /// An objective or gradient evaluated to NaN/inf.
    #[error("non-finite value encountered{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite { iteration: Option<usize> },

    /// Malformed kernel expression in a config file.
    #[error("kernel expression parse error: {0}")]
    KernelParse(String),

    /// Config file or model file violates the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Dataset ingestion failure (missing file, missing column, no usable rows).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code buckets for the command-line tool: schema/input problems
    /// exit 2, numerical failures exit 3, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::KernelParse(_) | Error::Schema(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::NotPsd { .. } | Error::NonFinite { .. } => 3,
            Error::DimensionMismatch(_) | Error::InvalidArgument(_) => 2,
        }
    }
}
