use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("kernel specs differ: {0}")]
    SpecMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear solve failed even after escalating the diagonal jitter.
    #[error("numeric failure: {message} (jitter reached {jitter:e}, gram size {size})")]
    Numeric {
        message: String,
        jitter: f64,
        size: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}
