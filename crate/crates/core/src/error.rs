use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not enough classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class `{label}` has {available} mentions but its splits need {needed}")]
    InsufficientSamplesPerClass {
        label: String,
        needed: usize,
        available: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate frame id `{0}`")]
    DuplicateFrameId(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trigger span {start}..{end} out of range for {len} tokens in mention `{id}`")]
    SpanOutOfRange {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("non-finite gradient during {0}")]
    NonFiniteGradient(&'static str),

    #[error("empty class: a prototype needs at least one embedding")]
    EmptyClass,

    #[error("retained mention `{0}` is missing from the corpus")]
    MissingMention(String),

    #[error("input is not a probability vector (row {row}, sum {sum})")]
    NonProbabilityInput { row: usize, sum: f64 },

    #[error("zero-length feature vector at row {0}")]
    ZeroVector(usize),

    #[error("prediction distillation needs at least one old class")]
    EmptyOldClassSet,

    #[error("class `{0}` was already learned")]
    DuplicateClass(String),

    #[error("no known classes")]
    NoKnownClasses,

    #[error("class `{0}` has no knowledge embedding")]
    MissingKnowledge(String),

    #[error("negative F1 value {0} in curve")]
    NegativePrev(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
