use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("bad weight file magic at offset {offset}: expected \"VFW1\", found {found:?}")]
    BadMagic { offset: usize, found: Vec<u8> },

    #[error("weight file truncated at offset {offset} while reading {what}")]
    Truncated { offset: usize, what: String },

    #[error("shape mismatch in layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<u32>,
        found: Vec<u32>,
    },

    #[error("invalid weight file: {0}")]
    InvalidWeights(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("matcher failed at generation {generation}, candidate {candidate}: {source}")]
    Matcher {
        generation: usize,
        candidate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
