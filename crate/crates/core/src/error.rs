use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside its admissible domain (box bounds, positive
    /// hyperparameters, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The Gram matrix stayed non positive definite at maximum jitter.
    #[error("numerical conditioning error: {0}")]
    Conditioning(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("budget exhausted after {0} evaluations")]
    Budget(usize),

    #[error("state error: {0}")]
    State(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A resampled cost surface has its optimum on the cost floor.
    #[error("degenerate surface: {0}")]
    DegenerateSurface(String),

    #[error("grid fill error: {0}")]
    Fill(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
