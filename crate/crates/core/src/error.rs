use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("requested {requested} orthonormal vectors but only {available} dimensions exist")]
    DimensionExceeded { requested: usize, available: usize },
    #[error("prior cosines are infeasible: sum of squares {0} exceeds 1")]
    InfeasibleCosines(f64),
    #[error("log-gamma argument must be positive, got {0}")]
    NonPositiveArgument(f64),
    #[error("query budget of {budget} exhausted")]
    BudgetExhausted { budget: u64 },
    #[error("upper end of the bracket is not adversarial")]
    InvalidBracket,
    #[error("ray does not reach the adversarial region within the search range")]
    NoCrossing,
    #[error("boundary is degenerate along the ray (|dh/dlambda| = {0:e})")]
    DegenerateBoundary(f64),
    #[error("no surrogate region with a label other than the true label along the ray")]
    TargetedSetupFailed,
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("no initial direction reached the adversarial region")]
    InitFailed,
    #[error("exemplar is not classified as the target class")]
    BadExemplar,
    #[error("line search found no improving step")]
    NoImprovement,
    #[error("invalid theory spec: {0}")]
    InvalidSpec(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("metric requested over an empty suite")]
    EmptySuite,
    #[error("metric requested over an empty trace")]
    EmptyTrace,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
