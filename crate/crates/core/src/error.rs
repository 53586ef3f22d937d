use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("spectral failure: {message} (condition estimate {condition:.3e})")]
    Spectral { message: String, condition: f64 },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("graph generation failed after {attempts} attempts (seed {seed})")]
    Generation { seed: u64, attempts: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
