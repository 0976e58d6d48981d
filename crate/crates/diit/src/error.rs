//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on shape.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: String,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration value rejected during validation; `key` is the JSON path.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed CSV input. Line numbers count from 1 and include the header.
    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("field `{field}` index {index} out of range (cardinality {cardinality})")]
    FeatureIndex {
        field: String,
        index: usize,
        cardinality: usize,
    },

    /// A loss component went NaN/Inf; training aborts rather than skipping.
    #[error("non-finite {component} loss ({value}) in period {period}")]
    NonFiniteLoss {
        component: String,
        value: f64,
        period: u32,
    },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

impl Error {
    pub fn dimension(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn csv(line: usize, message: impl Into<String>) -> Self {
        Error::Csv {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
