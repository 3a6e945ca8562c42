//! Error type shared by every module, with a stable mapping to process
//! exit codes for the command-line front end.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent run configuration (bad field values,
    /// unknown preset, malformed TOML).
    #[error("configuration error: {0}")]
    Config(String),

    /// Unreadable or malformed input data (series files, period tables,
    /// checkpoints with the wrong layout).
    #[error("data error: {0}")]
    Data(String),

    /// A tensor or grid had an unexpected shape. Always a programming or
    /// checkpoint-mismatch error, never a data-content error.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Caller-supplied argument outside its documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// Training produced non-finite losses and cannot continue.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// The configured wall-clock budget was exhausted before training
    /// finished; a checkpoint was written for later resumption.
    #[error("wall-clock budget exhausted: {0}")]
    WallClock(String),

    /// Tensor-backend failure (allocation, unsupported op, ...).
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    /// Filesystem failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error when it escapes the CLI.
    ///
    /// 2 = configuration, 3 = data, 4 = numeric divergence, 5 = wall-clock
    /// budget; everything else is a generic failure (1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Divergence(_) => 4,
            Error::WallClock(_) => 5,
            _ => 1,
        }
    }
}
