use std::path::PathBuf;

use thiserror::Error;

use crate::grid::{LineId, ValidationReport};

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid case: {0}")]
    Validation(ValidationReport),

    #[error("unsupported feature: {0}")]
    Unsupported(String),

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("singular network: {0}")]
    Singular(String),

    #[error("line {0} cannot be solved: zero or invalid reactance")]
    BadLine(LineId),

    #[error("unbalanced injections: net {0} MW")]
    Unbalanced(f64),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("cyclic flow graph in period {0}")]
    CyclicFlows(usize),

    #[error("retryable fetch failure: {0}")]
    Retryable(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 validation, 3 infeasible, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::Unbalanced(_) | Error::Singular(_) | Error::CyclicFlows(_) => 3,
            Error::Io { .. } | Error::Retryable(_) => 4,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Unsupported(_) => "unsupported",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Singular(_) => "singular",
            Error::BadLine(_) => "bad_line",
            Error::Unbalanced(_) => "unbalanced",
            Error::Infeasible(_) => "infeasible",
            Error::Invalid(_) => "invalid",
            Error::CyclicFlows(_) => "cyclic_flows",
            Error::Retryable(_) => "retryable",
            Error::Io { .. } => "io",
        }
    }

    /// `error kind=<kind> code=<n>: <message>` on one line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error kind={} code={}: {msg}", self.kind(), self.exit_code())
    }
}
