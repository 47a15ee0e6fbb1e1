use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or rejected input data.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shape mismatch, unknown id, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity produced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A rejection sampler could not find an admissible draw.
    #[error("sampling infeasible: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
