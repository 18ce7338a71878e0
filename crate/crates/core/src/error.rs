use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent caller input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The model cannot be evaluated for the given parameters.
    #[error("model error: {0}")]
    Model(String),

    /// A likelihood or objective term evaluated to NaN or infinity.
    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },

    #[error("zero denominator in {0}")]
    ZeroDenominator(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
