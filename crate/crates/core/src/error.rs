use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: row {row}, column `{column}`: {message}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("unknown sensor id `{0}`")]
    UnknownSensor(String),
    #[error("timestamps are not monotone in {file} at row {row}")]
    NonMonotoneTime { file: String, row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("no admissible windows: {0}")]
    NoAdmissibleWindows(String),
    #[error("no supervised targets")]
    NoSupervisedTargets,
    #[error("non-finite loss in epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss { epoch: usize, batch: usize, norms: String },
    #[error("checkpoint format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt checkpoint at byte offset {offset}: {message}")]
    CorruptCheckpoint { offset: usize, message: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
