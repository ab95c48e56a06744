use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular point: {0}")]
    Singular(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("point outside grid: {0}")]
    OutOfDomain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("accuracy: {0}")]
    Accuracy(String),
    #[error("iteration diverged after {iterations} steps (last ratio {ratio:.3}); try a smaller epsilon")]
    Divergence { iterations: usize, ratio: f64 },
    #[error("no convergence within {iterations} iterations (residual {residual:.3e})")]
    Timeout { iterations: usize, residual: f64 },
    #[error("resonant harmonic mode l={0} in the pressure problem")]
    Resonance(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
