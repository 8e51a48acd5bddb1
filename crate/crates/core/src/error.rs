//! Error type shared across the pipeline.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures the pipeline can surface.
///
/// The CLI maps these onto process exit codes: configuration/usage problems
/// exit 1, data/file-format problems exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, arguments, or API misuse.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data: {0}")]
    Data(String),

    /// Malformed input data at a known line of a known file.
    #[error("data: {path}:{line}: {msg}")]
    DataLine {
        path: String,
        line: usize,
        msg: String,
    },

    /// Numeric failure (non-finite loss, degenerate statistics, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Helper for attaching a file path and 1-based line number to a message.
    pub fn at_line(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::DataLine {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
