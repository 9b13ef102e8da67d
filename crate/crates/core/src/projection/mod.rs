//! Projection of a resampled cloud onto tensorized Gaussian mixtures.

mod em;
mod kmeans;
mod tensorized;

use thiserror::Error;

use crate::cloud::ParticleCloud;
use crate::gaussian::MixtureError;
use crate::rng::SeedStream;

pub use em::{em_fit, em_fit_2d, log_likelihood, EmFit, EmFitConfig};
pub use kmeans::kmeanspp_init;
pub use tensorized::{fit_tensorized, model_log_density, model_sample, TensorizedGmm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("EM needs at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("samples contain non-finite values")]
    NonFinite,
    #[error("every EM restart produced a non-finite log-likelihood")]
    AllRestartsFailed,
    #[error("dimension {dim} is not a multiple of the block size {block}")]
    DimensionNotDivisible { dim: usize, block: usize },
    #[error("projection expects a uniformly weighted (resampled) cloud")]
    WeightedCloud,
    #[error("block fits failed: {0:?}")]
    Blocks(Vec<(usize, ProjectionError)>),
    #[error("invalid projection config: {0}")]
    BadConfig(String),
    #[error("model text line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// A normalized, samplable proposal density.
pub trait ProposalModel: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// `n` i.i.d. draws; particle `i` must depend only on `stream.particle(i)`.
    fn sample(&self, n: usize, stream: SeedStream) -> ParticleCloud;

    /// Human-readable parameter dump.
    fn describe(&self) -> String;
}
