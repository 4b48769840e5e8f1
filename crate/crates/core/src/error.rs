use thiserror::Error;

/// Errors produced by the scheduling library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown ssm id {0}")]
    UnknownSsm(usize),

    #[error("batch of {batch} exceeds capacity {capacity} on ssm {ssm}")]
    Capacity {
        ssm: usize,
        batch: usize,
        capacity: usize,
    },

    #[error("arithmetic error: {0}")]
    Arithmetic(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("instance too large for exhaustive search: {0}")]
    Size(String),

    #[error("layout corruption: {0}")]
    Layout(String),

    #[error("mask does not match layout: {0}")]
    Consistency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("comparison error: {0}")]
    Comparison(String),
}

pub type Result<T> = std::result::Result<T, Error>;
