use std::path::PathBuf;

/// Errors surfaced by the platoon engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("clock violation: message received at {t_received} s before it was sent at {t_sent} s")]
    ClockViolation { t_sent: f64, t_received: f64 },

    #[error("vehicle {vehicle} never reaches position {ell} m within the simulated horizon")]
    NoCrossing { vehicle: usize, ell: f64 },

    #[error("quadratic program is malformed: {0}")]
    MalformedProblem(String),

    #[error("safe-set cache {path:?} is stale or corrupt: {reason}")]
    StaleCache { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
