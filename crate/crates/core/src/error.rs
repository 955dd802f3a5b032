use std::path::PathBuf;

use crate::optim::TraceRow;
use crate::render::MediumParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("total internal reflection: (n_from/n_to)·sin(phi) = {ratio} > 1")]
    TotalInternalReflection { ratio: f64 },

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate ratio: {0}")]
    DegenerateRatio(String),

    #[error("non-finite loss at iteration {iteration} (A = {:?}, beta = {:?})", params.a, params.beta)]
    NonFiniteLoss {
        iteration: usize,
        params: MediumParams,
        trace: Vec<TraceRow>,
    },

    #[error("value out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("image format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
