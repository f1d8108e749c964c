use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The control set has no point inside the compactification ball.
    #[error("control set does not meet the ball of radius {radius}")]
    InfeasibleCompactification { radius: f64 },

    #[error("sampling resolution too coarse: {0}")]
    ResolutionTooCoarse(String),

    #[error("decrease not certifiable down to sampling time {delta}: violated from state {state:?}")]
    NotCertifiable { delta: f64, state: Vec<f64> },

    #[error("value {value} outside admissible range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("not an MRF on the region: {} witness(es), first at {:?}", .witnesses.len(), .witnesses.first())]
    NotAnMrf { witnesses: Vec<Vec<f64>> },

    #[error("no compactification radius up to {n_max} works at level {level}")]
    CoercivityFailure { level: f64, n_max: f64 },

    #[error("inf-convolution minimizer on the search box boundary at {0:?}")]
    BoxTooSmall(Vec<f64>),

    #[error("degenerate regularity estimates: {0}")]
    EstimatesDegenerate(String),

    #[error("reshaping map infeasible for level {n}: {reason}")]
    InfeasiblePsi { n: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
