//! Command failures carrying an exit-code category.

use std::fmt;

use fsied::Error;

/// Exit codes: 2 configuration, 3 data, 4 internal.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    code: i32,
    error: anyhow::Error,
}

pub type Outcome<T> = Result<T, Failure>;

impl Failure {
    pub fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, anyhow::anyhow!(message.into()))
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, anyhow::anyhow!(message.into()))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(EXIT_INTERNAL, anyhow::anyhow!(message.into()))
    }

    pub fn context(self, context: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { code: self.code, error: self.error.context(context) }
    }

    pub fn code(&self) -> i32 {
        self.code
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn category(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::InsufficientClasses { .. }
        | Error::InsufficientSamplesPerClass { .. }
        | Error::Parse { .. }
        | Error::DuplicateFrameId(_)
        | Error::SpanOutOfRange { .. }
        | Error::UnknownClass(_)
        | Error::MissingMention(_)
        | Error::MissingKnowledge(_)
        | Error::DuplicateClass(_)
        | Error::NegativePrev(_)
        | Error::Data(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
        Error::Batch { source, .. } => category(source),
        _ => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(category(&e), e)
    }
}

/// Attaches context to library errors while keeping their category.
pub trait Context<T> {
    fn with(self, context: impl fmt::Display + Send + Sync + 'static) -> Outcome<T>;
}

impl<T> Context<T> for Result<T, Error> {
    fn with(self, context: impl fmt::Display + Send + Sync + 'static) -> Outcome<T> {
        self.map_err(|e| Failure::from(e).context(context))
    }
}

impl<T> Context<T> for Outcome<T> {
    fn with(self, context: impl fmt::Display + Send + Sync + 'static) -> Outcome<T> {
        self.map_err(|e| e.context(context))
    }
}
