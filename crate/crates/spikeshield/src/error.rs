use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter combination that can never be valid (strides, pool sizes,
    /// epoch milestones, empty calibration sets, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input values outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse, e.g. calling backward on a non-scalar tensor.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward op produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Malformed input file.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Structurally valid data that is internally inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint encode/decode failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss diverged.
    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged {
        epoch: usize,
        step: usize,
        msg: String,
    },

    /// A pipeline stage failed; names the stage so partial runs are
    /// attributable.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Error {
        Error::Io(std::io::Error::other(e))
    }
}

impl Error {
    /// Wraps an error with the name of the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
