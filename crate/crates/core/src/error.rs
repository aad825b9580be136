use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the captioning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: range {start}..{end} out of bounds for axis of size {size}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad magic in {kind} file")]
    BadMagic { kind: &'static str },

    #[error("unsupported {kind} file version {version}")]
    UnsupportedVersion { kind: &'static str, version: u32 },

    #[error("truncated {kind} file: {detail}")]
    Truncated { kind: &'static str, detail: String },

    #[error("dimension mismatch in {kind} file: {detail}")]
    DimensionMismatch { kind: &'static str, detail: String },

    #[error("malformed {kind} file: {detail}")]
    Malformed { kind: &'static str, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by an unreadable or inconsistent file payload.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::DimensionMismatch { .. }
                | Error::Malformed { .. }
                | Error::Json(_)
        )
    }
}
