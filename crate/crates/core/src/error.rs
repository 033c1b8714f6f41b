//! Error taxonomy shared across the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure categories surfaced by the library.
///
/// Divergence of a training run is deliberately *not* an error: it is a
/// recorded outcome (see `task::TrialResult`). `Diverged` is only used
/// where a caller must be signalled immediately, e.g. non-finite
/// gradients reaching the clipper.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// Invalid configuration: bad ranges, missing entries, unknown names.
    Config(String),
    /// A numeric precondition failed (e.g. zero-variance row with eps 0).
    Numeric(String),
    /// API misuse, e.g. backward on a consumed tape.
    Usage(String),
    /// Non-finite values where finite ones are required.
    Diverged(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Diverged(m) => write!(f, "divergence: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
