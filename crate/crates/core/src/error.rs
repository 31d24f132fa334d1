use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric positive definite (smallest/largest eigenvalue ratio {ratio:e})")]
    NotPositiveDefinite { ratio: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },
    #[error("singular system in {context} (condition estimate {condition:e})")]
    Singular { context: &'static str, condition: f64 },
    #[error("root bracket failed in {context}: {detail}")]
    Bracket { context: &'static str, detail: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures that come from the numerics rather than from the input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite { .. } | Error::Singular { .. } | Error::Bracket { .. } | Error::NonFinite(_))
    }
}
