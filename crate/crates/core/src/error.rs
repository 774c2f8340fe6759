use alloc::string::String;

/// Error categories shared by every module of the crate.
///
/// The categories map onto the process exit codes used by the command line
/// front end (configuration 2, data 3, numeric 4).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, hyperparameters or wiring.
    #[error("configuration error: {0}")]
    Config(String),
    /// A NaN or infinity appeared in a forward or backward value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The API was called in an invalid way (non-scalar backward root, double backward, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data violates its contract (label ids, unnormalized histograms, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Synthetic sample placement failed after the retry budget.
    #[error("generation error: {0}")]
    Generation(String),
    /// Broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)*) => {{
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::$kind(alloc::format!($($arg)*)));
        }
    }};
}

pub(crate) use bail;
pub(crate) use ensure;
