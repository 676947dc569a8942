use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("path is not nearest-neighbour at step {index}")]
    NotNearestNeighbour { index: usize },

    #[error("horizon {horizon} exceeds the site cache budget of {budget} sites")]
    CacheBudget { horizon: usize, budget: usize },

    #[error(
        "harvest aborted after {steps} steps: {got} of {wanted} confirmed increments \
         ({trajectories} trajectories, {regenerations} regenerations seen)"
    )]
    HarvestBudget {
        got: usize,
        wanted: usize,
        steps: u64,
        trajectories: u64,
        regenerations: u64,
    },

    #[error("insufficient tail data: {0}")]
    InsufficientTail(String),

    #[error("tilt out of trustworthy domain: effective sample size {ess:.1} below floor {floor}")]
    TiltOutOfDomain { ess: f64, floor: f64 },

    #[error("no root in closed domain: {0}")]
    NoRoot(String),

    #[error("Hessian is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NonPsdHessian { min_eigenvalue: f64 },

    #[error("velocity {0:?} is not in the open half-space of the regeneration direction")]
    OutsideHalfSpace(Vec<f64>),

    #[error("path budget exceeded: {paths} paths > {budget}")]
    PathBudget { paths: u128, budget: u128 },

    #[error("degenerate region grid: {0}")]
    DegenerateGrid(String),

    #[error("too few samples: {got} < {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
