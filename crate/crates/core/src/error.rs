use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss while perturbing parameter `{param}`")]
    NonFiniteGradCheck { param: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("malformed dataset at line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("gradient check failed: max relative error {max_rel_err:e} >= {tol:e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },

    #[error("ablation arms failed: {}", .0.join(", "))]
    ArmsFailed(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for rejected input, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Shape(_)
            | Error::Config(_)
            | Error::Checkpoint { .. }
            | Error::Dataset { .. }
            | Error::MissingParam(_)
            | Error::Json(_) => 1,
            Error::NonFiniteGradCheck { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Io { .. }
            | Error::GradCheckFailed { .. }
            | Error::ArmsFailed(_) => 2,
        }
    }
}
