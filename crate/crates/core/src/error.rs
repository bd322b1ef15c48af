use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh construction failed: {0}")]
    MeshConstruction(String),

    #[error("coarse mapping failed: fine triangle {triangle} is {distance:.3e} away from every coarse triangle")]
    CoarseMapping { triangle: usize, distance: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("nonpositive coefficient {value:.6e} at triangle {triangle}")]
    Coefficient { triangle: usize, value: f64 },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
