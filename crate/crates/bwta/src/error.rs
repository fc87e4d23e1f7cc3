//! Crate-wide error type. One enum, no macros: every failure names the
//! operation that raised it and enough payload to reproduce the call.

use std::fmt;

/// Convenience alias used by every fallible function in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands disagree on a dimension the operation must reduce/match.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix with zero rows or columns where the operation needs data.
    ZeroDim { op: &'static str },
    /// Input was present but degenerate (e.g. all zeros where a norm is needed).
    EmptyInput {
        op: &'static str,
        detail: &'static str,
    },
    /// A scale that must be strictly positive was not.
    NonPositiveScale { op: &'static str, value: f32 },
    /// An entry violated the operation's domain (wrong integer range, non-finite float).
    BadEntry {
        op: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    /// Ternary positive/negative planes claim the same bit (corrupt data).
    PlaneOverlap { row: usize, word: usize, mask: u64 },
    /// A `.bwta` stream or text matrix that does not parse.
    FileFormat { detail: String },
    /// Underlying I/O failure, tagged with the path involved.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Bad key/value in a line-oriented config file, with its 1-based line number.
    Config { line: usize, detail: String },
    /// Any other precondition violation; `detail` says which.
    Invalid { op: &'static str, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::ZeroDim { op } => write!(f, "{op}: matrix has a zero dimension"),
            Error::EmptyInput { op, detail } => write!(f, "{op}: {detail}"),
            Error::NonPositiveScale { op, value } => {
                write!(f, "{op}: scale must be positive, got {value}")
            }
            Error::BadEntry {
                op,
                row,
                col,
                value,
            } => write!(f, "{op}: invalid entry {value} at ({row}, {col})"),
            Error::PlaneOverlap { row, word, mask } => write!(
                f,
                "ternary planes overlap at row {row}, word {word} (mask {mask:#018x})"
            ),
            Error::FileFormat { detail } => write!(f, "format error: {detail}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::Config { line, detail } => write!(f, "config line {line}: {detail}"),
            Error::Invalid { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Wrap an I/O error with the path it concerns.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
