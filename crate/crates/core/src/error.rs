use std::path::PathBuf;

/// Every failure the pipeline can report.
///
/// Each variant maps onto a short machine-parsable class via [`Error::class`],
/// which the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("cannot pool an empty sequence: every frame is masked")]
    EmptyPool,

    #[error("attention has no unmasked keys")]
    EmptyAttention,

    #[error("empty input sequence")]
    EmptySequence,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("clip {0} has no clean reference")]
    MissingReference(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("ensemble member {enhancer}/fold {fold} failed: {source}")]
    Member {
        enhancer: String,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Stable error class name used in single-line CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) | Error::EmptyPool | Error::EmptyAttention | Error::EmptySequence => {
                "contract"
            }
            Error::Config(_) => "config",
            Error::Numeric(_) | Error::UndefinedCorrelation(_) | Error::Diverged(_) => "numeric",
            Error::Format { .. } | Error::Json(_) | Error::Wav { .. } => "format",
            Error::Io { .. } => "io",
            Error::Validation(_) => "validation",
            Error::MissingReference(_) => "missing-reference",
            Error::Member { source, .. } => source.class(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
