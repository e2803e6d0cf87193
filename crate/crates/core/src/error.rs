use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, malformed config file, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with inputs that violate its contract
    /// (shape mismatch, wrong rank, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input is degenerate for the requested operation (e.g. constant image
    /// passed to z-normalisation). Caller decides whether to skip or fail.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training produced NaN/Inf losses and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A required input file or directory is missing.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// A training arm attempted to read a target-domain label.
    #[error("label access violation: {0}")]
    LabelLeak(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 divergence, 4 missing input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Diverged(_) | Error::Numeric(_) => 3,
            Error::MissingInput(_) => 4,
            _ => 1,
        }
    }
}
