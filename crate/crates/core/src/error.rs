use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure modes of each
/// subsystem so callers can match on what went wrong.
#[derive(Debug, Error)]
pub enum HydraError {
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward op produced NaN or Inf from finite inputs.
    #[error("non-finite values produced by `{0}`")]
    NonFinite(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// Utterance shorter than a branch's minimum receptive field. Callers
    /// may drop or pad the offending utterance.
    #[error("utterance too short: {0}")]
    TooShort(String),

    #[error("vocab error: token id {id} out of range for vocab size {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("selector error: {0}")]
    Selector(String),

    #[error("train error: {0}")]
    Train(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HydraError>;
