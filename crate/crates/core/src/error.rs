use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("audio file {0} contains no samples")]
    EmptyAudio(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal of {len} samples is shorter than one analysis window ({window})")]
    SignalTooShort { len: usize, window: usize },

    #[error("length mismatch: {left} vs {right} frames")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate vocal range statistics: {0}")]
    DegenerateStats(String),

    #[error("{path}:{line}: malformed manifest line: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateUtterance(String),

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("symbol id {id} out of vocabulary of size {size}")]
    OutOfVocabulary { id: u32, size: usize },

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("variant contract violated: {0}")]
    VariantContract(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed data in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    /// True for failures caused by the input data rather than by how the API was called.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::UnsupportedEncoding { .. }
                | Error::EmptyAudio(_)
                | Error::SignalTooShort { .. }
                | Error::LengthMismatch { .. }
                | Error::DimensionMismatch { .. }
                | Error::EmptyInput(_)
                | Error::DegenerateStats(_)
                | Error::MalformedManifest { .. }
                | Error::DuplicateUtterance(_)
                | Error::UnknownSymbol(_)
                | Error::UnknownSpeaker(_)
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Wav(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
        )
    }
}
