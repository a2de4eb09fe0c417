use thiserror::Error;

use crate::simulator::Trajectory;

pub type Result<T, E = SsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SsdError {
    #[error("empty conditional support")]
    EmptyConditionalSupport,

    #[error("mixture has no components")]
    EmptyMixture,

    #[error("component {index}: {reason}")]
    InvalidComponent { index: usize, reason: String },

    #[error("weights must sum to 1 (got {sum})")]
    WeightsNotNormalized { sum: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range [0, {horizon}]")]
    TimestepOutOfRange { t: u32, horizon: u32 },

    #[error("unknown schedule family `{0}`")]
    UnknownSchedule(String),

    #[error("schedule horizon must be at least 2 (got {0})")]
    HorizonTooShort(u32),

    #[error("degenerate noise: ‖ε‖ = 0")]
    DegenerateNoise,

    #[error("need at least 2 samples (got {0})")]
    TooFewSamples(usize),

    #[error("invalid estimator: {0}")]
    InvalidEstimator(String),

    #[error("invalid optimizer config: {0}")]
    InvalidOptimizer(String),

    #[error("divergence at step {step}: non-finite θ")]
    Divergence { step: usize, partial: Box<Trajectory> },

    #[error("no convergence: every seed hit the iteration cap")]
    NoConvergence,

    #[error("no bimodal regime: conditional marginal is unimodal at t=1")]
    NoBimodalRegime,

    #[error("undefined weight at terminal t (α_t = 0)")]
    TerminalWeight,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("artifact already exists: {0} (pass --overwrite to replace)")]
    ArtifactExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
