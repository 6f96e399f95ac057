use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset layout: {0}")]
    DatasetLayout(String),

    #[error("frame count mismatch: color/ has {color} frames, ir/ has {ir}")]
    FrameCountMismatch { color: usize, ir: usize },

    #[error("groundtruth mismatch: {frames} frames but {boxes} box lines")]
    GroundtruthMismatch { frames: usize, boxes: usize },

    #[error("groundtruth line {line}: {message}")]
    BoxParse { line: usize, message: String },

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("unknown attribute tag: {0:?}")]
    UnknownAttribute(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence too short: length {length}, need at least {required}")]
    SequenceTooShort { length: usize, required: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown ablation row: {0:?}")]
    UnknownRow(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
