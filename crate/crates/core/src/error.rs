use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped into the coarse classes the CLI maps onto exit codes
/// (see [`Error::class`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Input(String),

    #[error("puzzle has no solution")]
    NoSolution,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("sequence of {len} tokens exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

/// Coarse error class; stable strings used in machine-parseable CLI output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Provenance,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Input => "input",
            ErrorClass::Numerical => "numerical",
            ErrorClass::Provenance => "provenance",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Input => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Provenance => 4,
        }
    }
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Provenance(_) => ErrorClass::Provenance,
            _ => ErrorClass::Input,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
