use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error at layer {layer}: {reason}")]
    Shape { layer: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("decode error at byte {offset}: {reason}", offset = offset.map(|o| o.to_string()).unwrap_or_else(|| "?".into()))]
    Decode { offset: Option<usize>, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("transfer error: {reason}: {}", names.join(", "))]
    Transfer { reason: String, names: Vec<String> },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("storage error on {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("inconsistent report: no confusion matrix matches the reported {metric}")]
    Inconsistency { metric: String },

    #[error("ambiguous report: {count} confusion matrices match every reported metric")]
    Ambiguous { count: usize },

    #[error("report error: missing artifacts: {}", missing.join(", "))]
    Report { missing: Vec<String> },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, flags, arguments).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
