use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary file, line {line}: {msg}")]
    VocabParse { line: usize, msg: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("vocab_size {requested} is too small; minimum feasible size is {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {id} at position {position} is out of range (vocab size {size})")]
    IdOutOfRange { position: usize, id: u32, size: usize },

    #[error("matrix file: {0}")]
    MatrixFormat(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("non-finite value in source row for old token id {id}")]
    NonFiniteSource { id: u32 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input data rather than bad flags or a bug.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidUtf8 { .. }
                | Error::VocabParse { .. }
                | Error::InvalidVocab(_)
                | Error::IdOutOfRange { .. }
                | Error::MatrixFormat(_)
                | Error::NonFinite { .. }
                | Error::NonFiniteSource { .. }
                | Error::Data { .. }
                | Error::Json(_)
                | Error::Io(_)
        )
    }

    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_) | Error::Numerical(_) | Error::NanLoss { .. })
    }
}
