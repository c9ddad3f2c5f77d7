use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("fixed point not converged (residual {residual:e} after {iterations} iterations)")]
    NotConverged { residual: f64, iterations: usize },

    #[error("dense computation refused: dimension {dim} exceeds budget {budget}")]
    DenseBudget { dim: usize, budget: usize },

    #[error("power iteration found no single dominant real eigenvalue (modulus estimate {modulus}, residual {residual:e})")]
    NoDominantEigenvalue { modulus: f64, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
