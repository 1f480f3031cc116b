use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FvitError>;

#[derive(Debug, Error)]
pub enum FvitError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite values at {at}: {detail}")]
    Numerical { at: String, detail: String },

    #[error("missing input {id}: {path}")]
    MissingInput { id: String, path: PathBuf },

    #[error("malformed FVT1 data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FvitError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        FvitError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        FvitError::Parameter(msg.into())
    }
}
