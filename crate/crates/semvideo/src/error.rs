//! Error type shared across the crate.
//!
//! Errors split into two families that map onto process exit codes:
//! configuration/user problems (exit code 2: bad config files, missing
//! inputs, malformed tensors or manifests) and internal/runtime failures
//! (exit code 1: a mining endpoint that keeps failing, a render backend that
//! dies, I/O errors mid-run).

use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

/// Lift an I/O result into a crate result, reporting "not found" as a
/// validation error — a missing input file is a user problem, not an
/// internal one — and everything else as an I/O error.
pub fn missing_as_validation<T>(r: std::io::Result<T>, path: &Path) -> Result<T> {
    match r {
        Ok(v) => Ok(v),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Validation(format!(
            "required file is missing: {}",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad run configuration (TOML syntax, unknown keys, out-of-range values).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or missing input data (manifests, shapes, ids).
    #[error("validation error: {0}")]
    Validation(String),

    /// A binary tensor file that does not follow the on-disk format.
    #[error("bad tensor data in {origin}: {detail}")]
    TensorFormat { origin: String, detail: String },

    /// I/O failure with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Caption mining failed after retries were exhausted.
    #[error("caption mining failed: {0}")]
    Mining(String),

    /// A render stage failed; `stage` names the stage that died.
    #[error("render stage {stage} failed: {detail}")]
    Render { stage: String, detail: String },

    /// Anything else that goes wrong mid-run.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration and user-input
    /// problems, 1 for internal/runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::TensorFormat { .. } => 2,
            Error::Io { .. } | Error::Mining(_) | Error::Render { .. } | Error::Runtime(_) => 1,
        }
    }
}
