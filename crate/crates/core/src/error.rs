use std::io;

use thiserror::Error;

/// Errors produced anywhere in the tokenizer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Cell {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported signal format {0} (only format 16 is supported)")]
    UnsupportedFormat(u32),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("signal error: {0}")]
    Signal(String),

    #[error("token parse error at position {position}: {message}")]
    Token { position: usize, message: String },

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
