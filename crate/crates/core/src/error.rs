use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A box or delta outside the domain of an operation (e.g. zero width under a log).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Rejection sampling ran out of draws before collecting enough accepted samples.
    #[error("sampling exhausted: accepted {accepted} of {wanted} after {draws} draws")]
    Exhausted { wanted: usize, accepted: usize, draws: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
