use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("corrupted {what}: {reason}")]
    Corrupt { what: String, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("ingestion failed: {}", .offenders.join("; "))]
    Ingest { offenders: Vec<String> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at {stage} step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn corrupt(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            what: what.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Structural(_) | Error::Domain(_)
        )
    }

    /// Process exit status: 1 for rejected input (bad configuration, malformed
    /// or mismatched artifacts), 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Structural(_)
            | Error::Domain(_)
            | Error::Corrupt { .. }
            | Error::Version { .. }
            | Error::Integrity(_)
            | Error::Ingest { .. } => 1,
            _ => 2,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
