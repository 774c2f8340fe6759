use std::path::PathBuf;

/// Errors of the file formats, the driver and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] snet_core::Error),
    /// Malformed STNT or checkpoint bytes; `offset` is where decoding stopped.
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format { path: String, offset: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use snet_core::Error as C;
        match self {
            Error::Config(_) | Error::Core(C::Config(_) | C::Usage(_)) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Core(C::Data(_) | C::Generation(_)) => 3,
            Error::Core(C::Numeric(_)) => 4,
            Error::Core(C::Internal(_)) => 1,
        }
    }
}
