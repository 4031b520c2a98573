use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmpcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("solver diverged: {0}")]
    SolverDiverged(String),
    #[error("planner failure: {0}")]
    PlannerFailure(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CmpcError>;
