use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing required column '{0}'")]
    MissingColumn(String),

    #[error("invalid lane id {0} (lane ids start at 1)")]
    InvalidLane(i64),

    #[error("maneuver window unavailable at index {index} (trajectory has {len} records, window {window})")]
    WindowUnavailable {
        index: usize,
        len: usize,
        window: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("occupancy mask integrity violation: {0}")]
    MaskIntegrity(String),

    #[error("cannot split {vehicles} distinct vehicle(s) into three non-degenerate sets")]
    SplitInfeasible { vehicles: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible artifacts: {0}")]
    Compatibility(String),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Exit code the CLI maps this error to: misconfiguration and
    /// compatibility problems are usage errors (2), everything else is a
    /// runtime failure (1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Compatibility(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
