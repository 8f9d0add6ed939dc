//! Error type shared by all modules.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inputs have inconsistent shapes (vector lengths, matrix dims, axis counts).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A parameter violates its domain (negative bandwidth, alpha outside [0,1], ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data rejected (negative counts, empty test set, unknown label, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix that must be positive definite failed to factorize.
    /// The context names what was being factorized (e.g. the condition index).
    #[error("matrix not positive definite: {0}")]
    Singular(String),

    /// The ELBO became non-finite during optimization.
    #[error("non-finite ELBO at iteration {iteration} ({term})")]
    NonFiniteElbo { iteration: usize, term: String },

    /// Malformed or inconsistent configuration / file format.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// An internal invariant was violated; indicates a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn singular(context: impl Into<String>) -> Self {
        Error::Singular(context.into())
    }

    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_parameter(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
