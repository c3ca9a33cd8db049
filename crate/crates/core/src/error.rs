use std::io;

/// Errors produced by the toolkit.
///
/// Each variant maps onto one process exit code in the command-line front
/// end, see [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// 0 success, 1 I/O, 2 configuration, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::Numerical(_) => 3,
            Error::Dimension { .. }
            | Error::Argument(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Integrity(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
