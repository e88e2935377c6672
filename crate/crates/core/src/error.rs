use std::path::PathBuf;

use maskflow_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("index {index} out of range for split `{split}` ({len} records)")]
    Range { split: String, index: usize, len: usize },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: not found; run `maskflow {hint}` first")]
    Missing { path: PathBuf, hint: &'static str },

    #[error("loss became non-finite at step {step} (batch {fingerprint:016x})")]
    Diverged { step: usize, fingerprint: u64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// True when the caller, not the program, is at fault.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            Error::Range { .. } | Error::Domain { .. } | Error::Config(_) | Error::Missing { .. } => true,
            Error::Format { .. } => true,
            Error::Tensor(TensorError::Checkpoint { .. }) | Error::Tensor(TensorError::Io { .. }) => true,
            Error::Tensor(_) | Error::Diverged { .. } => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
