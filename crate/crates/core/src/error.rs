use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty corpus: no vocabulary token has a positive count")]
    EmptyCorpus,

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("row {row} has zero L2 norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("numerical overflow; retry in log domain")]
    NumericalOverflow,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing required path `{0}`")]
    MissingPath(&'static str),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::InvalidValue(_)
                | Error::UnknownKey(_)
                | Error::MissingPath(_)
                | Error::OutOfVocabulary { .. }
                | Error::StepOutOfRange { .. }
                | Error::Empty(_)
                | Error::EmptyCorpus
        )
    }
}

pub(crate) fn dim_mismatch(what: impl Into<String>) -> Error {
    Error::DimensionMismatch(what.into())
}
