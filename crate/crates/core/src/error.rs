use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("empty supervision: no position contributes to {0}")]
    EmptySupervision(&'static str),

    #[error("vocabulary error: token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate representation: row {row} of {side} has zero norm")]
    DegenerateRepresentation { side: &'static str, row: usize },

    #[error("phase-order error: expected {expected}, found {found}")]
    PhaseOrder { expected: String, found: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config mismatch in field `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("calibration produced an empty set ({selected} selected, 0 agreed)")]
    CalibrationEmpty { selected: usize },

    #[error("undefined perplexity: {0}")]
    UndefinedPerplexity(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error name, printed by the CLI on failure.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "DimensionError",
            Error::Rank(_) => "RankError",
            Error::EmptySupervision(_) => "EmptySupervisionError",
            Error::Vocabulary { .. } => "VocabularyError",
            Error::EmptySequence(_) => "EmptySequenceError",
            Error::Config(_) => "ConfigError",
            Error::Data(_) => "DataError",
            Error::DegenerateRepresentation { .. } => "DegenerateRepresentationError",
            Error::PhaseOrder { .. } => "PhaseOrderError",
            Error::Integrity(_) => "IntegrityError",
            Error::ConfigMismatch { .. } => "ConfigMismatchError",
            Error::CalibrationEmpty { .. } => "CalibrationEmptyError",
            Error::UndefinedPerplexity(_) => "UndefinedPerplexityError",
            Error::Parse { .. } => "ParseError",
            Error::Schema { .. } => "SchemaError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
