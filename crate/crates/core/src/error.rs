use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("support mask has no foreground pixel at feature resolution")]
    EmptyForeground,

    #[error("support mask has no background pixel at feature resolution")]
    EmptyBackground,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed netpbm data: {0}")]
    Pnm(String),

    #[error("unsupported netpbm maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at step {step} (lr {lr}): {detail}")]
    NonFiniteLoss { step: u64, lr: f64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the errors a caller should answer by skipping or resampling
    /// the episode rather than aborting.
    pub fn is_empty_partition(&self) -> bool {
        matches!(self, Error::EmptyForeground | Error::EmptyBackground)
    }
}
