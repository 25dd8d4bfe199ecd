use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    Parameter(String),
    /// Grid dimensions or channel counts do not line up.
    Shape(String),
    /// An annotation references pixels or superpixels that do not exist.
    Annotation(String),
    /// Weather records do not cover a required day.
    DataGap(String),
    /// Training produced a non-finite loss.
    TrainingFailure { step: u64, loss: f64 },
    /// Input is well-formed but the statistic is undefined on it.
    Degenerate(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parameter(m) => write!(f, "invalid parameter: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Annotation(m) => write!(f, "invalid annotation: {m}"),
            Error::DataGap(m) => write!(f, "missing data: {m}"),
            Error::TrainingFailure { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
            }
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
