use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {side} user `{id}`")]
    UnknownUser { side: String, id: String },

    #[error("micro score undefined: empty behavior sequence")]
    MicroUndefined,

    #[error("sequence of length {len} exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("leakage: event at t={event} is not before T={cutoff} for {owner}")]
    Leakage { owner: String, event: i64, cutoff: i64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownConfigKey { key: String, valid: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("timer resolution ({resolution_ns} ns) too coarse for measured interval ({measured_ns} ns); increase batch size")]
    TimerResolution { resolution_ns: u64, measured_ns: u64 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Stable upper-case code used by the command-line runner.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyAttentionSupport => "EMPTY_ATTENTION_SUPPORT",
            Error::Shape { .. } => "SHAPE_MISMATCH",
            Error::NonFinite(_) => "NON_FINITE",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::UnknownUser { .. } => "UNKNOWN_USER",
            Error::MicroUndefined => "MICRO_UNDEFINED",
            Error::SequenceTooLong { .. } => "SEQUENCE_TOO_LONG",
            Error::Leakage { .. } => "LEAKAGE",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::UnknownConfigKey { .. } => "UNKNOWN_CONFIG_KEY",
            Error::Diverged { .. } => "DIVERGED",
            Error::TimerResolution { .. } => "TIMER_RESOLUTION",
            Error::Checkpoint(_) => "CHECKPOINT_FORMAT",
            Error::NotFound(_) => "NOT_FOUND",
            Error::Io(_) => "IO_ERROR",
            Error::Json(_) => "JSON_ERROR",
        }
    }
}
