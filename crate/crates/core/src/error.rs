use thiserror::Error;

/// Errors produced by tensor operations, model construction, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: crate::tensor::DType,
        rhs: crate::tensor::DType,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("archive format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("archive entry not found: {0}")]
    MissingEntry(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
