use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: cannot decode image: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: schema mismatch: expected {expected}, found {found}", path.display())]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("detector unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("weights not cached at {}", path.display())]
    WeightsCacheMiss { path: PathBuf },

    #[error("weight download failed for {url}: {message}")]
    WeightsNetwork { url: String, message: String },

    #[error("weights {}: {message}", path.display())]
    WeightsMismatch { path: PathBuf, message: String },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("frozen parameters changed during training: {0}")]
    FrozenModified(String),

    #[error("run {}: {message}", path.display())]
    RunConflict { path: PathBuf, message: String },

    #[error("no checkpoint in run dir {}", path.display())]
    MissingCheckpoint { path: PathBuf },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure comes from the machine (filesystem, detector
    /// process, network, tensor backend) rather than from user input.
    pub fn is_environment(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::DetectorUnavailable(_)
                | Error::WeightsNetwork { .. }
                | Error::Tensor(_)
        )
    }
}
