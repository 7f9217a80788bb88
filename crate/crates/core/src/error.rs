use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shingle set for document {0}")]
    EmptyShingles(String),

    #[error("word count is zero, fertility undefined")]
    ZeroWords,

    #[error("duplicate token in extension list: {0:?}")]
    DuplicateToken(String),

    #[error("extension token already in base vocabulary: {0:?}")]
    TokenInBase(String),

    #[error("zero-norm vector for token {0:?}")]
    ZeroNormVector(String),

    #[error("no external vector for token {0:?}")]
    MissingExternalVector(String),

    #[error("embedding/unembedding row counts differ: {0} vs {1}")]
    RowCountMismatch(usize, usize),

    #[error("base layer count {0} not divisible by period {1}")]
    NonDivisiblePeriod(usize, usize),

    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),

    #[error("dtype mismatch for tensor {0}")]
    DtypeMismatch(String),

    #[error("tensor shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("token id {0} out of range (vocab size {1})")]
    TokenIdOutOfRange(u32, usize),

    #[error("sequence length {0} exceeds context length {1}")]
    ContextOverflow(usize, usize),

    #[error("model configs do not match: {0}")]
    ConfigMismatch(String),

    #[error("malformed role sequence: {0}")]
    BadRoleSequence(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("judge output could not be parsed: {0}")]
    JudgeParse(String),

    #[error("scoring backend failed: {0}")]
    Scoring(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
