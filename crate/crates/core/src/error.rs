use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front-ends to pick exit codes and
/// response statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad parameters or misuse of the API.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// Numerical failure: disconnected graph, non-convergence, singular system.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("vector at row {row} has zero norm; angular distance is undefined")]
    ZeroNorm { row: usize },

    #[error("graph is disconnected: {} components with sizes {component_sizes:?}", component_sizes.len())]
    Disconnected { component_sizes: Vec<usize> },

    #[error("node {node} has zero degree")]
    ZeroDegree { node: usize },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("node {node} is already labeled")]
    AlreadyLabeled { node: usize },

    #[error("node {node} is out of range for {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("pool exhausted: no unlabeled candidates remain")]
    PoolExhausted,

    #[error("no pending query")]
    NoPendingQuery,

    #[error("node {got} is not the pending query (expected {expected})")]
    NodeMismatch { expected: usize, got: usize },

    #[error("journal error: {0}")]
    Journal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_)
            | Error::AlreadyLabeled { .. }
            | Error::NodeOutOfRange { .. }
            | Error::LabelOutOfRange { .. }
            | Error::PoolExhausted
            | Error::NoPendingQuery
            | Error::NodeMismatch { .. } => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InvalidLabels(_)
            | Error::ZeroNorm { .. }
            | Error::Journal(_) => ErrorClass::Data,
            Error::Disconnected { .. }
            | Error::ZeroDegree { .. }
            | Error::NoConvergence { .. }
            | Error::Singular(_) => ErrorClass::Numeric,
        }
    }
}
