use thiserror::Error;

/// Errors produced anywhere in the scoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("transport error ({context}): {message}")]
    Transport { context: String, message: String },

    #[error("labeling error for {context}: unparseable verdict {raw:?}")]
    Labeling { context: String, raw: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Transport failures are the only errors worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    /// Short machine-readable kind tag, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Precondition(_) => "precondition",
            Error::Argument(_) => "argument",
            Error::Numerical(_) => "numerical",
            Error::Dimension(_) => "dimension",
            Error::Join(_) => "join",
            Error::Transport { .. } => "transport",
            Error::Labeling { .. } => "labeling",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
