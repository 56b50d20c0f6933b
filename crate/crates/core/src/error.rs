use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::container::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("{algorithm} did not converge on a {rows}x{cols} matrix after {sweeps} sweeps")]
    NoConvergence {
        algorithm: &'static str,
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),

    #[error("merge rejected: {0}")]
    Merge(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error("evaluation failed for target `{target}` in trial {trial}: {source}")]
    Trial {
        target: String,
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

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
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
