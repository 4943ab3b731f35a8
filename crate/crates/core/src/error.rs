use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A row of a CSV table could not be turned into a record.
    #[error("{message}, line {line}")]
    Parse { line: u64, message: String },

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("{0}")]
    Pgm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no initial set: {0}")]
    NoInitialSet(String),

    #[error("center ({x}, {y}) lies outside the {width}x{height} image")]
    CenterOutsideImage { x: f64, y: f64, width: usize, height: usize },

    #[error("unknown label {0}")]
    UnknownLabel(String),

    #[error("duplicate label {0}")]
    DuplicateLabel(String),

    #[error("training needs at least 2 labels, got {0}")]
    TooFewLabels(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("frame {frame} outside ground truth range 0..{frames}")]
    FrameOutsideTruth { frame: usize, frames: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bundle validation failed: {0}")]
    Bundle(String),

    #[error("detection conservation violated: {0}")]
    Conservation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io { path: path.into(), source }
    }
}
