use nrt_kernel::KernelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    PixelOutOfBounds {
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
