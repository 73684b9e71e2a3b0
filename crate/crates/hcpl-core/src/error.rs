//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HcplError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid operand for {op}: {detail}")]
    InvalidOperand { op: &'static str, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl HcplError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        HcplError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HcplError>;
