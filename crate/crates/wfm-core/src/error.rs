//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape inconsistency, reported with the offending graph node.
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    /// Malformed computation graph (dangling reference, duplicate name, ...).
    #[error("invalid graph: {0}")]
    Graph(String),

    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    /// Corrupt or truncated checkpoint file.
    #[error("checkpoint error at byte offset {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    /// Bad configuration file or field.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
