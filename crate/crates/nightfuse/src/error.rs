//! Crate-wide error type.

/// Errors produced by any stage of the fusion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Incompatible grid or tensor dimensions.
    #[error("shape error: {0}")]
    Shape(String),
    /// Out-of-range or inconsistent parameter values.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Operation applied to a grid with the wrong units tag.
    #[error("units error: {0}")]
    Units(String),
    /// Sampler spec incompatible with the checkpoint objective.
    #[error("sampler spec error: {0}")]
    Spec(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Metric computation impossible on the given inputs.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A pipeline stage is missing an upstream artifact.
    #[error("stage error: {0}")]
    Stage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Spec(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
