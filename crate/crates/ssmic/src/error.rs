use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("weight store error: {0}")]
    Weights(String),
    #[error("entropy model error: {0}")]
    Entropy(String),
    #[error("range coder error: {0}")]
    Coder(String),
    #[error("container error: {0}")]
    Container(String),
    #[error("truncated {stream} stream: needed {needed} bytes, had {available}")]
    Truncated {
        stream: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("training diverged at step {step}: loss {loss} exceeds 1000x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
