use thiserror::Error;

/// Errors raised by the simulator and the measurement operations.
#[derive(Debug, Error)]
pub enum FlmcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite {what} at flat index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("partition infeasible: every one of {attempts} draws left a client empty")]
    PartitionInfeasible { attempts: usize },

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FlmcError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FlmcError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FlmcError::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FlmcError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FlmcError>;
