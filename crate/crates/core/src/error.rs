use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate branch {0}: zero series impedance")]
    DegenerateBranch(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("malformed case file: {0}")]
    MalformedCase(String),

    #[error("unknown bus reference {bus} in {context}")]
    UnknownBus { bus: usize, context: String },

    #[error("no reference bus")]
    NoReferenceBus,

    #[error("unsupported cost model: {0}")]
    UnsupportedCostModel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("no eligible component to drop: {0}")]
    NoEligibleComponent(String),

    #[error("labeler failure rate {rate:.3} exceeds cap {cap:.3} ({failed} of {total} failed)")]
    LabelerFailureRate {
        rate: f64,
        cap: f64,
        failed: usize,
        total: usize,
    },

    #[error("infeasible problem: maximum constraint violation {max_violation:.3e}")]
    Infeasible { max_violation: f64 },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("non-finite loss for example {example}")]
    NonFiniteLoss { example: usize },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
