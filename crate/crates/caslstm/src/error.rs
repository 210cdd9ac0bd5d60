//! Error type shared by all modules.

use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

/// Errors raised by tensor operations, model construction, and data
/// handling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// An index (token, label, ...) is outside its valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// An input that must be nonempty was empty.
    Empty(&'static str),
    /// A configuration or argument value is invalid.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs} and {rhs}")
            }
            Error::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (< {bound})")
            }
            Error::Empty(what) => write!(f, "{what} must not be empty"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
