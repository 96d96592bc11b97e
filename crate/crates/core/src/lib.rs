//! Hierarchical Poisson-lognormal models for spatially structured counts.

pub mod config;
pub mod confounding;
pub mod covariance;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod sampler;

pub use config::{ModelConfig, ModelId, RunConfig, TruthParams};
pub use confounding::{fit_rsr, misspecification_study, projection, rsr_ppd, ConfoundingReport};
pub use covariance::{
    cholesky_jittered, CorrelationSpec, CovarianceMatrix, DomainSpec, Projection, SpatialPoint,
};
pub use data::{generate_dataset, generate_locations, load_dataset, write_dataset, DesignSpec};
pub use error::{Error, Result};
pub use evaluation::{dic, dss, log_score, rps, score_model, PredictiveDistribution, ScoreReport};
pub use geometry::{AnisoTransform, EllipseParams, Location, Point, Shore};
pub use model::{Dataset, Hyperpriors, ParameterState};
pub use sampler::{run_chains, run_chains_with, ChainConfig, PosteriorSample};
