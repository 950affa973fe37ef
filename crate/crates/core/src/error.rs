use std::path::PathBuf;

/// Errors produced by the tracking engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: unsupported schema `{found}` (expected `{expected}`)")]
    Version {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("non-finite loss in training window {window}")]
    NonFiniteLoss { window: usize },

    #[error("evaluation undefined: {0}")]
    Evaluation(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err,
        }
    }
}
