use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate lane: {0}")]
    DegenerateLane(String),
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("rollout of {steps} steps at dt={dt} exceeds horizon {horizon}")]
    HorizonExceeded { steps: usize, dt: f64, horizon: f64 },
    #[error("no reference lane within {radius} m of ({x}, {y})")]
    NoReferenceLane { x: f64, y: f64, radius: f64 },
    #[error("invalid schedule parameters: {0}")]
    InvalidScheduleParams(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("latent codec has not been fitted")]
    ModelNotFitted,
    #[error("histogram edges differ")]
    EdgeMismatch,
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("backward called without a recorded forward pass")]
    GraphNotRecorded,
    #[error("scene must contain at least one agent")]
    EmptyScene,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
