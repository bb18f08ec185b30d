use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("vocabulary has no non-special tokens to sample from")]
    NoSampleableTokens,

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("edit script has {got} slots, caption of length {len} needs {}", len + 1)]
    ScriptLength { got: usize, len: usize },

    #[error("malformed edit script at slot {slot}: {reason}")]
    MalformedScript { slot: usize, reason: &'static str },

    #[error("step {got} outside of 1..={max}")]
    StepOutOfRange { got: usize, max: usize },

    #[error("caption is at step {got}, expected {expected}")]
    StepMismatch { got: usize, expected: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input of length {got} exceeds max_seq_len {max}")]
    Overlong { got: usize, max: usize },

    #[error("model/vocabulary mismatch: {0}")]
    Mismatch(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
