use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate mask: row {row} has no allowed position")]
    DegenerateMask { row: usize },

    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("solver exceeded its budget of {max_steps} steps")]
    StepBudget { max_steps: usize },

    #[error("stiff problem: step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("embedding dimension {d} exceeds node count {n}")]
    Rank { d: usize, n: usize },

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: parent user {parent} appears before it joined the cascade")]
    Ordering { line: usize, parent: u64 },

    #[error("prediction horizon {t_p} must exceed observation time {t_o}")]
    Horizon { t_o: f64, t_p: f64 },

    #[error("branching factor {0} must be below 1")]
    Supercritical(f64),

    #[error("inference read post-observation data: {0}")]
    Leak(&'static str),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Parse,
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Parse { .. } | Error::Ordering { .. } | Error::Checkpoint(_) => Category::Parse,
            Error::Config(_) | Error::Horizon { .. } | Error::Supercritical(_) | Error::Rank { .. } | Error::EmptyGraph => Category::Config,
            Error::Io(_) => Category::Io,
            _ => Category::Numeric,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            Category::Parse => 2,
            Category::Config => 3,
            Category::Numeric => 4,
            Category::Io => 5,
        }
    }
}
