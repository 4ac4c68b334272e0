use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("domain error: {0}")]
    Domain(String),
    /// Bounds became too loose to relax the softmax denominator.
    #[error("unverifiable: {0}")]
    Unverifiable(String),
    #[error("non-finite gradient at site {site}")]
    Gradient { site: String },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("grid of {points} points exceeds budget of {cap}")]
    Budget { points: f64, cap: f64 },
    #[error("label {label} does not match predicted class {predicted}")]
    LabelMismatch { label: usize, predicted: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("verification fails even at eps = 0")]
    Degenerate,
    #[error("still verified after {doublings} doublings (eps = {eps})")]
    CapReached { doublings: u32, eps: f64 },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
