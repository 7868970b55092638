use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("character {ch:?} at index {index} is not in the vocabulary")]
    UnknownChar { ch: char, index: usize },

    #[error("text has {len} characters, limit is {limit}")]
    TooLong { len: usize, limit: usize },

    #[error("writer id {id} out of range 0..{n_styles}")]
    WriterOutOfRange { id: usize, n_styles: usize },

    #[error("record {index}: {message}")]
    Ingest { index: usize, message: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Format { context: String, message: String },

    #[error(transparent)]
    Numeric(#[from] glyphdiff_substrate::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Coarse class used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Numeric(glyphdiff_substrate::Error::NonFinite { .. }) => ErrorKind::Numeric,
            Error::Numeric(glyphdiff_substrate::Error::NonDeterministic { .. }) => {
                ErrorKind::Numeric
            }
            Error::Format { .. } | Error::Ingest { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Io => 2,
            ErrorKind::Numeric => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
