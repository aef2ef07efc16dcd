use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid transition row at (s={state}, a={action}): {reason}")]
    TransitionRow {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("invalid reward at (s={state}, a={action}): {value}")]
    Reward { state: usize, action: usize, value: f64 },

    #[error("discount factor must lie in [0, 1), got {0}")]
    Gamma(f64),

    #[error("state {0} has an empty safe action set")]
    EmptySafeSet(usize),

    #[error("invalid action embedding: {0}")]
    Embedding(String),

    #[error("value iteration did not reach tolerance {tol} in {iterations} sweeps (last residual {residual})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("no data to sample from: offline dataset and online buffer are both empty")]
    EmptySources,

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid grid world: {0}")]
    Grid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
