use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error in `{op}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { op: String, step: Option<usize> },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { msg: String, line: usize, column: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing upstream stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(op: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            step: None,
        }
    }

    /// Attaches a training step index to a numeric error; other variants pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { op, .. } => Error::Numeric { op, step: Some(step) },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        Error::Parse {
            msg: err.to_string(),
            line: err.line(),
            column: err.column(),
        }
    }
}
