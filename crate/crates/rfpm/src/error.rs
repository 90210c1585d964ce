use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, RfpmError>;

/// Errors emitted by the tensor engine, pyramid builder, data pipeline and trainer.
#[derive(Debug, Error)]
pub enum RfpmError {
    /// Data length does not match the product of the shape entries.
    #[error("size mismatch: shape needs {expected} elements, got {got}")]
    Size { expected: usize, got: usize },

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration is internally inconsistent or does not match the parameters.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric guard tripped (non-finite value, divergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not conform to its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// An input is degenerate (for example, zero valid pixels).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An argument value is out of range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Scene generation could not produce a valid sample.
    #[error("generation error: {0}")]
    Generation(String),

    /// A checkpoint could not be loaded into the target model.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
