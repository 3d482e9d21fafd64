use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("backward called on a value that is not part of a recorded graph: {0}")]
    Detached(String),

    #[error("model is not deterministic: loss {first} then {second} at identical parameters")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for KernelError {
    fn from(e: std::io::Error) -> Self {
        KernelError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KernelError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> KernelError {
    KernelError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> KernelError {
    KernelError::Invalid {
        op,
        detail: detail.into(),
    }
}
