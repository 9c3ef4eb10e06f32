use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid sentence {id}: {reason}")]
    InvalidSentence { id: u64, reason: String },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    UnknownId { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("every position is ignored; mean loss undefined")]
    AllIgnored,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset contains a single label; AUC undefined")]
    SingleLabel,
    #[error("no candidates")]
    NoCandidates,
    #[error("undecodable payload for image {0}")]
    Undecodable(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unknown sentence id {0}")]
    UnknownSentence(u64),
    #[error("search for {keyword:?} failed after {attempts} attempt(s): {message}")]
    Search { keyword: String, attempts: u32, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
}
