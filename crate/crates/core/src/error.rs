use thiserror::Error;

/// Errors produced by the bit-allocation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty feature column")]
    EmptyColumn,

    #[error("degenerate feature range: min {min} equals max {max}")]
    DegenerateRange { min: f64, max: f64 },

    #[error("non-finite input")]
    NonFinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("k = {k} out of range (at most {max} neighbours available)")]
    KOutOfRange { k: usize, max: usize },

    #[error("duplicate collapse: zero neighbour radius at sample {index}")]
    DuplicateCollapse { index: usize },

    #[error("bins finer than quantization on dimension {dim}: bin width {bin_width} < step {step}")]
    BinsFinerThanQuantization { dim: usize, bin_width: f64, step: f64 },

    #[error("empty feasible set")]
    EmptyFeasibleSet,

    #[error("estimator failed on allocation {allocation:?}: {source}")]
    Candidate {
        allocation: Vec<u32>,
        #[source]
        source: Box<Error>,
    },

    #[error("riccati iteration did not converge (residual {residual:e})")]
    RiccatiNonConvergence { residual: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("diverged")]
    Diverged,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("trajectory too short: {len} samples, need {need}")]
    ShortTrajectory { len: usize, need: usize },

    #[error("insufficient rollouts: collected {got} of {want} samples")]
    InsufficientRollouts { got: usize, want: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
