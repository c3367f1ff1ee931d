use thiserror::Error;

/// Errors produced by the numeric core.
#[derive(Error, Debug)]
pub enum Error {
    /// A caller violated an operation's precondition (timestep ordering,
    /// parameter ranges, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or Inf showed up where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Malformed configuration or checkpoint content.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
