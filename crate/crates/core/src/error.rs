use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside valid interval [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("point is {distance:e} away from the manifold (tolerance {tolerance:e})")]
    OffManifold { distance: f64, tolerance: f64 },

    #[error("rejection sampler acceptance rate {rate:e} below floor {floor:e}")]
    LowAcceptance { rate: f64, floor: f64 },

    #[error("net too coarse: probe point at distance {distance} > resolution {resolution}")]
    NetTooCoarse { distance: f64, resolution: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("transport size {size} exceeds exact-mode cap {cap}; subsample the clouds first")]
    SizeCapExceeded { size: usize, cap: usize },

    #[error("uncovered support points: {0:?}")]
    Uncovered(Vec<usize>),

    #[error("training diverged: risk {risk} exceeds {limit}")]
    Diverged { risk: f64, limit: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidArgument(msg.into()))
}
