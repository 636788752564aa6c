use thiserror::Error;

/// Errors produced by graph construction, chain analysis and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree family: {0}")]
    InvalidSpec(String),

    #[error("invalid vertex: {0}")]
    Addressing(String),

    #[error("graph is disconnected ({reached} of {total} vertices reachable)")]
    Disconnected { reached: usize, total: usize },

    #[error("{needed} vertices exceed the materialization budget of {budget}")]
    MemoryBudget { needed: u64, budget: u64 },

    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    #[error("lumping unavailable: {0}")]
    LumpingUnavailable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("chain is not reversible (max detailed-balance defect {0:e})")]
    NonReversible(f64),

    #[error("linear solve failed: relative residual {residual:e}")]
    Solver { residual: f64 },

    #[error("power iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("epsilon {0} is outside (0, 1)")]
    Epsilon(f64),

    #[error("empty time grid")]
    EmptyGrid,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
