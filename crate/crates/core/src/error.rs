use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("completion model error: {0}")]
    Model(String),

    #[error("{what} = {value} outside allowed range {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("policy returned invalid action {value} at window {window}")]
    PolicyAction { window: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for {what} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("no supervised positions in batch (mask is all zero)")]
    EmptyMask,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::MissingArtifact { .. } => 4,
            Error::Invariant(_) | Error::PolicyAction { .. } => 3,
            Error::Json(e) if e.is_io() => 4,
            _ => 2,
        }
    }
}
