use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus contains reserved special token `{0}`")]
    ReservedToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },
    #[error("vocabulary has no row-separator token")]
    NoRowSeparator,
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("parameter keys do not match: {0}")]
    KeyMismatch(String),
    #[error("n_items must be at least 1")]
    EmptyPopulation,
    #[error("invalid format: {0}")]
    Format(String),
}

impl Error {
    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
