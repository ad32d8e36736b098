use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt scene{}: {message}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    CorruptScene {
        frame: Option<usize>,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("trajectory leaves the layout: {0}")]
    TrajectoryOutsideLayout(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(frame: Option<usize>, message: impl Into<String>) -> Self {
        Self::CorruptScene {
            frame,
            message: message.into(),
        }
    }
}
