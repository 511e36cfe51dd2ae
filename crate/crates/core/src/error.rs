use alloc::string::String;

/// Error type shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration is invalid or underspecified.
    #[error("config error: {0}")]
    Config(String),
    /// Caller-supplied data violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// An API contract was violated (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// Audio and video streams disagree on the number of time steps.
    #[error("synchronization error: {0}")]
    Sync(String),
    /// A forward op produced NaN or infinity from finite inputs.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// Training could not continue.
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
