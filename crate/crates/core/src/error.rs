use std::path::PathBuf;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation diverged at step {step}: non-finite value")]
    SimulationDiverged { step: usize },

    #[error("Kalman filter degenerate at period {period}: innovation covariance is singular")]
    FilterDegenerate { period: usize },

    #[error("particle weights collapsed to zero at period {period}")]
    WeightCollapse { period: usize },

    #[error("non-finite activation in layer `{layer}`")]
    NumericOverflow { layer: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("ground truth factor has zero variance")]
    ZeroVariance,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("network error: {0}")]
    Network(String),

    #[error("HTTP error: status {status}")]
    Http { status: u16 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::SimulationDiverged { .. } => "simulation_diverged",
            Error::FilterDegenerate { .. } => "filter_degenerate",
            Error::WeightCollapse { .. } => "weight_collapse",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::ZeroVariance => "zero_variance",
            Error::Degenerate(_) => "degenerate",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Network(_) => "network",
            Error::Http { .. } => "http",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
