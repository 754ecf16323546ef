use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("agent index {index} out of range 1..={n_agents}")]
    AgentIndex { index: usize, n_agents: usize },

    #[error("graph is not connected")]
    Disconnected,

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("integration produced a non-finite state (t = {t})")]
    NonFiniteState { t: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("path scoring failed: {0}")]
    Scoring(String),

    #[error("scenario validation failed at `{field}`: {message}")]
    Scenario { field: String, message: String },

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("trial failed at cycle {cycle}: {message}")]
    Trial { cycle: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
