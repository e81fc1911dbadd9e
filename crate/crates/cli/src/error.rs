use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes. Kept stable so scripts can branch on failure modes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const DATA_FORMAT: i32 = 5;
    pub const DIVERGENCE: i32 = 6;
    pub const INTEGRITY: i32 = 7;
    pub const FETCH: i32 = 8;
    pub const CHECKPOINT: i32 = 9;
    pub const GRADCHECK: i32 = 10;
    pub const IO: i32 = 11;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ssnet::Error),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("integrity check failed for {name}: expected sha256 {expected}, got {actual}")]
    Integrity {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("could not download {url}: {message}\n{hint}")]
    Fetch {
        url: String,
        message: String,
        hint: String,
    },

    #[error("{0} gradient checks exceeded tolerance")]
    GradcheckFailed(usize),

    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use ssnet::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Config(_) | E::Json(_) | E::InvalidRate(_) | E::UnsupportedFilterWidth(_) => exit::CONFIG,
                E::Io(err) if err.kind() == io::ErrorKind::NotFound => exit::MISSING_FILE,
                E::Io(_) => exit::IO,
                E::Format { .. }
                | E::MalformedRecord { .. }
                | E::DegenerateChannel(_)
                | E::AlreadyNormalized
                | E::InsufficientStatistics(_)
                | E::UndefinedMetric => exit::DATA_FORMAT,
                E::Divergence { .. } => exit::DIVERGENCE,
                E::Checkpoint(_) => exit::CHECKPOINT,
                _ => exit::INTERNAL,
            },
            CliError::MissingFile(_) => exit::MISSING_FILE,
            CliError::Integrity { .. } => exit::INTEGRITY,
            CliError::Fetch { .. } => exit::FETCH,
            CliError::GradcheckFailed(_) => exit::GRADCHECK,
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => exit::MISSING_FILE,
            CliError::Io { .. } => exit::IO,
        }
    }

    /// Short category name printed alongside the message.
    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            exit::CONFIG => "config",
            exit::MISSING_FILE => "missing-file",
            exit::DATA_FORMAT => "data-format",
            exit::DIVERGENCE => "divergence",
            exit::INTEGRITY => "integrity",
            exit::FETCH => "fetch",
            exit::CHECKPOINT => "checkpoint",
            exit::GRADCHECK => "gradcheck",
            exit::USAGE => "usage",
            exit::IO => "io",
            _ => "internal",
        }
    }
}
