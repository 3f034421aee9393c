use thiserror::Error;

use crate::selector::SelectionResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),

    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid mixture model: {0}")]
    InvalidModel(String),

    #[error("model is not a single zero-mean isotropic Gaussian")]
    NotSpherical,

    #[error("grid does not cover the region of interest: {0}")]
    GridCoverage(String),

    #[error("empty contour: {0}")]
    EmptyContour(String),

    #[error("gradient vanishes on the level curve (|grad f| = {norm:.3e} at ({x:.4}, {y:.4}))")]
    DegenerateGradient { norm: f64, x: f64, y: f64 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// Every start failed to converge. The best point visited is still reported.
    #[error("optimizer did not converge from any start")]
    NoConvergence(Box<SelectionResult>),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoConvergence(_) => 2,
            Error::EmptyContour(_) | Error::DegenerateGradient { .. } | Error::GridCoverage(_) => 3,
            _ => 1,
        }
    }
}
