use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("semigroup violation at (s, t) = ({s}, {t}): max deviation {deviation:e}")]
    SemigroupViolation { s: f64, t: f64, deviation: f64 },

    #[error("time {t} outside path domain [0, {horizon}]")]
    OutOfDomain { t: f64, horizon: f64 },

    #[error("left limit is undefined at t = 0")]
    LeftLimitAtZero,

    #[error("path value is not finite at t = {t}")]
    PathBlowup { t: f64 },

    #[error("rate {value} at {at} violates declared bound {bound}")]
    RateBound { at: String, value: f64, bound: f64 },

    #[error("estimator aborted: non-finite observable value in replication {replication}")]
    EstimatorAbort { replication: usize },

    #[error("zero lifetime in block {block}: revivals require strictly positive lifetimes")]
    ZeroLifetime { block: usize },

    #[error("configuration: {0}")]
    Configuration(String),

    #[error("restore chain is reducible; the invariant law is not unique")]
    ReducibleChain,

    #[error("generator mismatch: slope {slope} outside [{lo}, {hi}]; (h, error) table: {table:?}")]
    GeneratorMismatch {
        slope: f64,
        lo: f64,
        hi: f64,
        table: Vec<(f64, f64)>,
    },

    #[error("degenerate statistical input: {0}")]
    DegenerateInput(String),

    #[error("report key mismatch: {a:?} vs {b:?}")]
    KeyMismatch { a: String, b: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
