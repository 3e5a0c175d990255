use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TtsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("duration total {durations} does not match {frames} mel frames")]
    DurationMismatch { durations: usize, frames: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("speaker {0} not found")]
    UnknownSpeaker(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("audio error: {0}")]
    Audio(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Params(#[from] lrtts_nn::NnError),
}

pub type Result<T, E = TtsError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| TtsError::Io {
            path: path.into(),
            source,
        })
    }
}
