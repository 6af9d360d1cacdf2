use std::fmt;

/// Crate-wide error type. Every variant maps to a stable error-class
/// prefix on the diagnostic stream so scripts can grep CLI output.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration (bad sizes, missing keys, incompatible modes).
    Config(String),
    /// Invalid argument to an in-process operation.
    Argument(String),
    /// Dataset-level problem (empty class, ipc too large, ...).
    Data(String),
    /// Raw frame ingestion failure; carries the offending path when known.
    Ingest(String),
    /// On-disk format violation (bad magic, checksum, truncation, layout digest).
    Format(String),
    /// Expert training diverged or could not run.
    Train(String),
    /// Distillation-loop failure (non-finite inner loss, bad buffer tag).
    Distill(String),
    /// Degenerate trajectory-matching target.
    Match(String),
    /// Evaluation failure.
    Eval(String),
    /// Architecture not supported by the requested analysis.
    Unsupported(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl Error {
    /// Stable class prefix used in CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config-error",
            Error::Argument(_) => "argument-error",
            Error::Data(_) => "data-error",
            Error::Ingest(_) => "ingest-error",
            Error::Format(_) => "format-error",
            Error::Train(_) => "train-error",
            Error::Distill(_) => "distill-error",
            Error::Match(_) => "match-error",
            Error::Eval(_) => "eval-error",
            Error::Unsupported(_) => "unsupported-arch-error",
            Error::Io(_) => "io-error",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m)
            | Error::Argument(m)
            | Error::Data(m)
            | Error::Ingest(m)
            | Error::Format(m)
            | Error::Train(m)
            | Error::Distill(m)
            | Error::Match(m)
            | Error::Eval(m)
            | Error::Unsupported(m) => write!(f, "{}: {}", self.class(), m),
            Error::Io(e) => write!(f, "{}: {}", self.class(), e),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
