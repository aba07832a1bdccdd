use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// [`Error::class`] maps each variant onto the coarse classes the CLI prints
/// and turns into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("caption does not parse: {0}")]
    Parse(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("batch of {0} is too small; need at least 2")]
    BatchTooSmall(usize),

    #[error("requested {requested} distinct captions but only {available} are expressible")]
    NotEnoughCaptions { requested: usize, available: usize },

    #[error("non-finite loss in {stage} at step {step}: {detail}")]
    NumericalAbort {
        stage: String,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn malformed(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Incompatible(_) | Error::NotEnoughCaptions { .. } => {
                "config_error"
            }
            Error::MissingInput(_) => "input_missing",
            Error::NumericalAbort { .. } => "numerical_abort",
            Error::Malformed { .. } | Error::VersionMismatch { .. } => "malformed_input",
            Error::Io { .. } => "io_error",
            _ => "internal_error",
        }
    }
}
