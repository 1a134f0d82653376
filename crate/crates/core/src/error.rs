use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver, the operator layer and the inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Sinkhorn iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("right-hand side is not centered (weighted mean {mean:e})")]
    NotCentered { mean: f64 },

    #[error("deflated system is numerically singular: {0}")]
    SingularSystem(String),

    #[error("self-transport spectrum requested but P and Q differ")]
    NotSelfTransport,

    #[error("matrix not symmetric after balancing (residual {0:e})")]
    NonSymmetric(f64),

    #[error("empty sample")]
    EmptySample,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::SingularSystem(_) | Error::NonSymmetric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
