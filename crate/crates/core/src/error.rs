use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate pilot: raw pilot weights have zero Frobenius norm")]
    DegeneratePilot,

    #[error("degenerate sample: target column has zero norm (sample {sample}, user {user})")]
    DegenerateSample { sample: usize, user: usize },

    #[error("infeasible ZC shift: pilot length {np} is smaller than user count {k}")]
    InfeasibleShift { np: usize, k: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("bundle version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("method `{0}` is an external baseline and out of scope for this workbench")]
    OutOfScope(String),

    #[error("missing bundle: {0}")]
    MissingBundle(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
