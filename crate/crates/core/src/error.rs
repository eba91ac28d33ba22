use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{count} non-finite pixel value(s) in input field")]
    NonFinite { count: usize },

    #[error("{count} negative rain-rate value(s)")]
    NegativeRainRate { count: usize },

    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("crop {crop:?} does not fit in frame {frame:?}")]
    CropTooLarge {
        crop: (usize, usize),
        frame: (usize, usize),
    },

    #[error("dimensions {dims:?} not divisible by patch size {patch}; pad to {padded:?}")]
    NotDivisible {
        dims: (usize, usize),
        patch: usize,
        padded: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes {found:?} in {path}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("token index {index} out of range for codebook of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("context length {len} outside [1, {max}]")]
    ContextLength { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("probability vector is not normalizable")]
    NonNormalizable,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch: forecaster expects tokenizer {expected}, got {found}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("vocabulary mismatch: forecaster K={forecaster}, tokenizer K={tokenizer}")]
    VocabMismatch { forecaster: usize, tokenizer: usize },

    #[error("training diverged at step {step}: non-finite reconstruction loss")]
    Diverged { step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
