use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("calibration did not converge after {iterations} iterations (residual {residual:.3e})")]
    Calibration { iterations: usize, residual: f64 },
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("efficiency: {0}")]
    Efficiency(String),
    #[error("convergence: {0}")]
    Convergence(String),
    #[error("config: {0}")]
    Config(String),
    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
