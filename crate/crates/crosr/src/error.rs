use thiserror::Error;

/// Crate-wide error type. Variants map 1:1 onto the categories reported by
/// the CLI, so every failure is machine-distinguishable.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad shapes, missing keys,
    /// out-of-range hyperparameters).
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (labels out of range, dimension
    /// mismatch, empty dataset).
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced or detected non-finite values, or an iterative
    /// solver failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file does not conform to its on-disk format. `offset` is the byte
    /// position at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Tail fitting failed (degenerate or starved tail). Callers fitting
    /// per-class profiles prefix the class so the message names it.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category tag used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Numerical(_) => "numerical",
            Error::Format { .. } => "format",
            Error::Fit(_) => "fit",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI. 0 is reserved for success; missing
    /// files and bad configs exit with 2 so scripts can distinguish setup
    /// problems from computation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            Error::Input(_) => 3,
            Error::Format { .. } => 4,
            Error::Numerical(_) => 5,
            Error::Fit(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
