use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no observed entries to fit or score")]
    NoObservedData,

    #[error("non-finite loss at coordinate {param}[{index}] during finite differencing")]
    NonFiniteProbe { param: usize, index: usize },

    #[error("training diverged at epoch {epoch} (last finite combined losses: {last_finite:?})")]
    Diverged { epoch: usize, last_finite: Vec<f64> },

    #[error("svd imputation did not converge after {iterations} iterations (last change {last_change:e})")]
    SvdNotConverged { iterations: usize, last_change: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used by the CLI and the C bindings.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NoObservedData => "no-observed-data",
            Error::NonFiniteProbe { .. } => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::SvdNotConverged { .. } => "not-converged",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
