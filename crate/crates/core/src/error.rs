use thiserror::Error;

/// Errors produced by tensor operations, the tape, and model assembly.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("contraction spec {spec:?}: {msg}")]
    InvalidSpec { spec: String, msg: String },

    #[error("{op}: {extent} is not divisible by {divisor}")]
    NotDivisible { op: &'static str, extent: usize, divisor: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("multi-axis attention needs an even head count, got {0}")]
    OddHeads(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("batch norm in eval mode needs populated running statistics")]
    MissingRunningStats,

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
