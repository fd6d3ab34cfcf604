use thiserror::Error;

/// Errors raised by the learning, certification and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("point is outside the cover (nearest center at distance {distance}, radius {radius})")]
    OutOfCover { distance: f64, radius: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("covering number overflows ({0}); use a larger gamma")]
    CoverOverflow(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("repetition {index}: {source}")]
    Repetition { index: usize, source: Box<Error> },
}

impl Error {
    /// Process exit code: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Repetition { source, .. } => source.exit_code(),
            Error::Numerical(_) | Error::NonFinite { .. } | Error::CoverOverflow(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
