use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BevError>;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("inconsistent input: {0}")]
    Consistency(String),
    #[error("not a probability distribution: {0}")]
    Distribution(String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error("loss undefined: {0}")]
    Loss(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("gradient oracle failed: {0}")]
    Oracle(String),
    #[error("depth completion failed: {0}")]
    Completion(String),
    #[error("cannot build costmap: {0}")]
    Costmap(String),
    #[error("planner stuck: {0}")]
    Stuck(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BevError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        BevError::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        BevError::Param(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BevError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        BevError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 I/O, 3 validation, 4 numeric failure. Usage errors (1) never
    /// originate in the library.
    pub fn exit_code(&self) -> i32 {
        match self {
            BevError::Io { .. } | BevError::Format { .. } => 2,
            BevError::NonFinite(_) | BevError::Oracle(_) | BevError::Stuck(_) => 4,
            _ => 3,
        }
    }
}
