use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("numeric failure in {module} at step {step}: {detail}")]
    Numeric {
        module: &'static str,
        step: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("episode already finished at t = {0}")]
    EpisodeOver(usize),

    #[error("mock VLM fixture {path} exhausted after {consumed} records")]
    FixtureExhausted { path: String, consumed: usize },

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("skipped preference pair cannot be used for training")]
    SkippedPair,

    #[error("empty selection: {0}")]
    EmptySelection(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::NonFinite { .. } | Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
