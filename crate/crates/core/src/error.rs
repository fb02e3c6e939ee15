//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A token sequence is empty or longer than the model context.
    #[error("length error: {0}")]
    Length(String),

    /// A vector or matrix does not have the shape the model expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer, position or head index is outside the model range.
    #[error("range error: {0}")]
    Range(String),

    /// A forward pass produced a NaN or infinity.
    #[error("non-finite value at layer {layer}, position {position}")]
    Numeric { layer: usize, position: usize },

    /// An operation was called with arguments that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Attention contributions only flow from earlier to later tokens.
    #[error("causal-order error: source position {source_pos} is after query position {query_pos}")]
    CausalOrder { source_pos: usize, query_pos: usize },

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// The embedding provider failed.
    #[error("embedding provider error: {0}")]
    Provider(String),

    /// A stage of an experiment run failed.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }
}
