use alloc::string::String;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or channel counts do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A parameter or configuration value is outside its valid range.
    #[error("configuration error: {0}")]
    Config(String),
    /// The API was used in an unsupported way (e.g. a variable from another tape).
    #[error("usage error: {0}")]
    Usage(String),
    /// Network parameters are not arranged the way an operation expects.
    #[error("structural error: {0}")]
    Structural(String),
    /// A tensor contains NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Synthetic scene generation could not place the requested shapes.
    #[error("generation error: {0}")]
    Generation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! structural_err {
    ($($arg:tt)*) => { $crate::Error::Structural(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use structural_err;
pub(crate) use dim_err;
