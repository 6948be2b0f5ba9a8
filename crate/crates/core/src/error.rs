use std::path::PathBuf;

use thiserror::Error;

/// Errors from the tensor layer and the tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` registered twice on one tape")]
    DuplicateParam(String),
}

/// Top-level error for everything above the tensor layer.
#[derive(Debug, Error)]
pub enum EatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
}

impl EatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line tool: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            EatError::Config(_) | EatError::Invalid(_) => 1,
            EatError::Data(_) | EatError::Io { .. } => 2,
            EatError::Tensor(_) => 2,
            EatError::NonFiniteGradient(_) | EatError::NonFiniteLoss { .. } => 3,
        }
    }
}

pub type Result<T, E = EatError> = std::result::Result<T, E>;
