use thiserror::Error;

/// Failures while decoding a binary trace file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("magic check failed: expected \"KVTRACE1\", found {:?}", String::from_utf8_lossy(.found))]
    BadMagic { found: [u8; 8] },
    #[error("unsupported trace version {found} (this reader understands version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated trace: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing data after trace payload: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("invalid trace header: {0}")]
    InvalidHeader(String),
    #[error("non-finite value in {tensor} block of layer {layer} head {head}")]
    NonFinite {
        layer: usize,
        head: usize,
        tensor: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Hyperparameters that cannot produce a valid cache layout.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("trace parse error: {0}")]
    Parse(#[from] TraceParseError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
