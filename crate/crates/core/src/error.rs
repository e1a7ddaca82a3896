//! Error type shared by every module of the simulator.

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate split: cut index {cut} must lie strictly inside 0..{layers}")]
    DegenerateSplit { cut: usize, layers: usize },

    #[error("insufficient out-of-distribution samples: required {required}, available {available}")]
    InsufficientSamples { required: usize, available: usize },

    #[error("numerical failure ({context}): {detail}")]
    Numerical { context: String, detail: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("outside the valid regime: {0}")]
    Regime(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attaches context to a numerical failure; other variants pass through.
    pub(crate) fn with_context(self, ctx: impl FnOnce() -> String) -> Self {
        match self {
            Error::Numerical { context, detail } => Error::Numerical {
                context: format!("{}; {}", ctx(), context),
                detail,
            },
            other => other,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
