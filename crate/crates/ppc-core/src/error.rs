//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by registration primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument violated a documented precondition.
    InvalidArgument(String),
    /// A 3D point required in front of the source had z ≤ ε.
    BehindCamera,
    /// Surface extraction found no voxels above the gradient threshold.
    EmptySurface,
    /// Apparent-contour selection kept fewer points than a solvable system needs.
    InsufficientContours { found: usize },
    /// The constraint system has too few usable rows.
    InsufficientConstraints { rows: usize, needed: usize },
    /// The unregularized system has effective rank below 6.
    RankDeficient,
    /// The posed volume is entirely behind the X-ray source.
    NothingVisible,
    /// A text payload could not be parsed; `line` is 1-based.
    Format { line: usize, message: String },
    /// Initial-pose sampling accepted fewer than 1% of draws.
    InfeasibleRanges,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::BehindCamera => write!(f, "point is behind the X-ray source"),
            Error::EmptySurface => write!(f, "no surface voxels above the gradient threshold"),
            Error::InsufficientContours { found } => {
                write!(f, "only {found} apparent-contour points selected (need at least 6)")
            }
            Error::InsufficientConstraints { rows, needed } => {
                write!(f, "only {rows} usable constraint rows (need at least {needed})")
            }
            Error::RankDeficient => write!(f, "constraint system is rank deficient"),
            Error::NothingVisible => write!(f, "posed volume lies entirely behind the source"),
            Error::Format { line, message } => write!(f, "format error at line {line}: {message}"),
            Error::InfeasibleRanges => {
                write!(f, "initial-pose sampling acceptance rate below 1%")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

/// Shorthand for [`Error::InvalidArgument`] with a formatted message.
macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid_arg;
