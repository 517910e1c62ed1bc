use std::path::PathBuf;

/// Errors produced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: normalized axis is empty")]
    EmptyAxis { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("diffusion step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("no CTC alignment: target needs {required} frames, input has {available}")]
    InfeasibleAlignment { required: usize, available: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("training diverged at step {step} ({stage}): {detail}")]
    Divergence {
        step: usize,
        stage: String,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Rank { .. } => "rank",
            Error::EmptyAxis { .. } => "empty_axis",
            Error::Config(_) => "config",
            Error::Step { .. } => "step",
            Error::Data(_) => "data",
            Error::InfeasibleAlignment { .. } => "infeasible_alignment",
            Error::Format(_) => "format",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
