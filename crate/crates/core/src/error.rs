use thiserror::Error;

/// Broad failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid curvature {0}: must be positive and finite")]
    InvalidCurvature(f64),

    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),

    #[error("point is not strictly inside the ball (c*|x|^2 = {0})")]
    OutsideBall(f64),

    #[error("degenerate hyperplane normal (|a| = {0:e})")]
    DegenerateNormal(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unbound graph input `{0}`")]
    Unbound(String),

    #[error("non-finite value produced by node #{node} ({op}{label})")]
    NumericFailure {
        node: usize,
        op: &'static str,
        label: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidCurvature(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Wav(_) | Error::Json(_) => ErrorCategory::Data,
            Error::Io(_) => ErrorCategory::Io,
            Error::CurvatureMismatch(..)
            | Error::OutsideBall(_)
            | Error::DegenerateNormal(_)
            | Error::NonFinite(_)
            | Error::Shape(_)
            | Error::Unbound(_)
            | Error::NumericFailure { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
