//! Error type shared by every module in the crate.

use std::path::Path;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The variants are grouped by how a caller should react: `Config`,
/// `Shape` and `Graph` mean the request itself was malformed; `Io` and
/// `Format` mean the filesystem or a file's contents were bad; `Diverged`
/// means training produced a non-finite loss and the run must stop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor was constructed or combined with inconsistent dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A graph was used out of order (e.g. backward before forward) or
    /// wired inconsistently.
    #[error("graph error: {0}")]
    Graph(String),

    /// Training produced a non-finite loss; the run cannot continue.
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// An underlying filesystem operation failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failed.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an io error with the path it occurred on.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// Builds a format error for the given path.
    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format { path: path.display().to_string(), reason: reason.into() }
    }
}
