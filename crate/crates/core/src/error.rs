use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no coverage: every beam of every array has zero receive power")]
    NoCoverage,

    #[error("user is co-located with the basestation")]
    ZeroDistance,

    #[error("no candidates: message has no detections")]
    NoCandidates,

    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for failures the CLI reports as numeric (exit code 3).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Diverged(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
