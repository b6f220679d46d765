use std::io;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    Shape(String),

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("not enough data for concept {concept}: {detail}")]
    DataScarcity { concept: String, detail: String },

    #[error("infeasible split: {0}")]
    Infeasible(String),

    #[error("degenerate probe: weight vector has zero norm")]
    DegenerateProbe,

    #[error("degenerate surrogates for concept {0}: low percentile is not below high percentile")]
    DegenerateSurrogate(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
