//! Entropic mirror Monte Carlo (EM2C).
//!
//! An adaptive importance sampler that alternates a tempered entropic mirror
//! step on the current proposal with an exploration branch pushed through a
//! Markov kernel, and projects the resulting empirical measure back onto a
//! tensorized Gaussian mixture family.

pub mod baselines;
pub mod cloud;
pub mod exact_grid;
pub mod experiment;
pub mod gaussian;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod mirror;
pub mod projection;
pub mod rng;
pub mod targets;

pub use cloud::ParticleCloud;
pub use gaussian::{GaussianMixture, GaussianMixture2D};
pub use kernels::{apply_kernel, KernelKind, KernelSpec};
pub use rng::SeedStream;
pub use targets::{Target, TargetId, TargetSpec};
