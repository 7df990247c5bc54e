use thiserror::Error;

use crate::corpus::RelationId;

pub type Result<T> = std::result::Result<T, LpdError>;

#[derive(Debug, Error)]
pub enum LpdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("relation {relation} has {available} instances, {needed} required")]
    InsufficientData {
        relation: RelationId,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cannot fit entity markers within max_length {max_length} (needs {needed})")]
    Truncation { max_length: usize, needed: usize },

    #[error("evaluation relations overlap relations seen in training: {0:?}")]
    Leakage(Vec<RelationId>),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LpdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LpdError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        LpdError::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LpdError::invalid(format!("{name} must be in [0, 1], got {p}")));
    }
    Ok(())
}
