use thiserror::Error;

#[derive(Debug, Error)]
pub enum TideError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("continuous-time instability: eigenvalue {re} + {im}i has non-negative real part")]
    Unstable { re: f64, im: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TideError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TideError::Dimension(msg.into()))
}
