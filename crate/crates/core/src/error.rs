//! Crate-wide error type.

use thiserror::Error;

use crate::geometry::Shore;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("cannot project a point lying at the centre")]
    ZeroNorm,

    #[error("point is not on the unit circle (|norm - 1| = {0:.3e})")]
    NotOnCircle(f64),

    #[error("coincident points have no subtended angle")]
    CoincidentPoints,

    #[error("correlation structure requires geodetic depth but the point carries none")]
    MissingCovariate,

    #[error("no locations on the {0} shore")]
    EmptyShore(Shore),

    #[error("matrix not positive definite after jitter ladder (largest jitter tried {0:.3e})")]
    NotPositiveDefinite(f64),

    #[error("singular covariance in conditional update")]
    SingularCovariance,

    #[error("non-finite linear predictor at site {0}")]
    NonFiniteLinearPredictor(usize),

    #[error("diagnostics need at least 2 chains, got {0}")]
    InsufficientChains(usize),

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientDesign { rank: usize, cols: usize },

    #[error("degenerate predictive variance (sigma <= 0)")]
    DegenerateVariance,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: missing required columns: {}", missing.join(", "))]
    Schema { path: String, missing: Vec<String> },

    #[error("sampler failed at iteration {iter}: {source}")]
    Sampler {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
