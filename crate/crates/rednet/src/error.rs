//! Crate-wide error type and the exit-code contract used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or matrix shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A call violated an API precondition (asymmetric input, stale
    /// activation record, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or a kernel that failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Bad dataset contents: labels out of range, malformed one-hot, ...
    #[error("data error: {0}")]
    Data(String),

    /// Unreadable manifest or blob.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Manifest and blob disagree, or a loaded artifact is internally
    /// inconsistent.
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid pipeline or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// A pipeline stage failed; carries the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Process exit code: 0 success, 2 config error, 3 data error,
    /// 4 numeric/training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Parameter(_)
            | Error::Contract(_)
            | Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Validation(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Diverged { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
