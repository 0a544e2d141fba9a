//! Crate-wide error type.
//!
//! Two broad families matter to callers: problems with what the caller asked
//! for (`Dimension`, `Config`, `Usage`, `Validation`, `Parse`) and problems
//! encountered while doing it (`Io`, `NonFinite`). The CLI maps the first
//! family to exit code 2 and the second to exit code 1.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix shapes do not line up for the requested operation.
    #[error("{context}: shape mismatch, expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    /// A configuration value is out of range or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// The operation was invoked in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data failed a semantic check (normalization, label values, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file could not be parsed; line is 1-based where known.
    #[error("parse error in {path}{}: {msg}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A numeric quantity that must stay finite became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    /// True for errors caused by how the caller invoked us rather than by
    /// the environment; the CLI reports these as usage/config failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Config(_)
                | Error::Usage(_)
                | Error::Validation(_)
                | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
