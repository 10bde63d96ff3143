use std::path::PathBuf;

/// Integrity failures when decoding IDX containers.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported rank {0} in IDX header")]
    UnsupportedRank(u8),
    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimensions describe {expected} bytes but the payload has {found}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("discriminator probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("enabled loss term `{0}` was not supplied")]
    MissingTerm(&'static str),
    #[error("model `{0}` is frozen and cannot be updated")]
    Frozen(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: IdxError },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Abort(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Idx { .. } | Error::Integrity(_) => 3,
            Error::Abort(_) | Error::NonFinite(_) => 4,
            Error::Report(_) => 5,
            _ => 1,
        }
    }
}
