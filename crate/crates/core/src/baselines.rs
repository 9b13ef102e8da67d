//! Comparison samplers: random-walk Metropolis chains and annealed importance
//! sampling with a linear schedule and random-walk transitions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::ParticleCloud;
use crate::kernels::{rw_step_with, KernelError, KernelKind, KernelSpec};
use crate::mirror::Em2cConfig;
use crate::projection::ProposalModel;
use crate::rng::{purpose, SeedStream, StreamRng};
use crate::targets::Target;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("AIS transitions must be random-walk kernels")]
    NotRw,
    #[error("AIS needs at least one temperature")]
    NoTemperatures,
    #[error("initial point has non-finite log-density")]
    BadStart,
    #[error("initial dimension {0} does not match target dimension {1}")]
    Dimension(usize, usize),
}

/// A single random-walk Metropolis chain; returns the state after each of the
/// `n_iter` steps.
pub fn run_rw_mcmc(target: &dyn Target, x0: &[f64], sigma: f64, n_iter: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>, BaselineError> {
    KernelSpec::rw(sigma, n_iter.max(1)).validate()?;
    let mut log_p = target.log_density(x0);
    if !log_p.is_finite() {
        return Err(BaselineError::BadStart);
    }
    let mut x = x0.to_vec();
    let mut scratch = vec![0.0; x.len()];
    let density = |y: &[f64]| target.log_density(y);
    let mut states = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        rw_step_with(&density, &mut x, &mut log_p, sigma, rng, &mut scratch);
        states.push(x.clone());
    }
    Ok(states)
}

/// Chain length of the single-chain baseline matched to an EM2C run: one
/// transition per kernel step per iteration.
pub fn matched_chain_length(cfg: &Em2cConfig) -> usize {
    cfg.kernel.n_steps * cfg.n_iterations
}

/// Final states of a population of chains, plus the number of transitions.
#[derive(Clone, Debug)]
pub struct PopulationOutput {
    pub cloud: ParticleCloud,
    pub applications: u64,
}

/// `n_chains` independent chains of `n_iter` RW steps started from i.i.d.
/// draws of `initial`; returns their final states.
pub fn run_rw_population(
    target: &dyn Target,
    initial: &dyn ProposalModel,
    n_chains: usize,
    sigma: f64,
    n_iter: usize,
    stream: SeedStream,
) -> Result<PopulationOutput, BaselineError> {
    KernelSpec::rw(sigma, n_iter.max(1)).validate()?;
    if initial.dim() != target.dim() {
        return Err(BaselineError::Dimension(initial.dim(), target.dim()));
    }
    let start = initial.sample(n_chains, stream.child(purpose::SAMPLE));
    let kstream = stream.child(purpose::KERNEL);
    let d = target.dim();
    let mut points = start.into_flat();
    points.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
        let mut rng = kstream.particle(i);
        let mut log_p = target.log_density(x);
        let mut scratch = vec![0.0; d];
        let density = |y: &[f64]| target.log_density(y);
        for _ in 0..n_iter {
            rw_step_with(&density, x, &mut log_p, sigma, &mut rng, &mut scratch);
        }
    });
    Ok(PopulationOutput {
        cloud: ParticleCloud::new(d, points).expect("consistent shape"),
        applications: (n_chains * n_iter) as u64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AisConfig {
    /// Number of temperatures L; the schedule is `beta_l = l / L`.
    pub n_temps: usize,
    /// Random-walk transition applied `n_steps` times per temperature.
    pub kernel: KernelSpec,
    pub n_particles: usize,
}

impl AisConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        self.kernel.validate()?;
        if self.kernel.kind != KernelKind::Rw {
            return Err(BaselineError::NotRw);
        }
        if self.n_temps == 0 {
            return Err(BaselineError::NoTemperatures);
        }
        Ok(())
    }

    /// `beta_0 = 0, ..., beta_L = 1`.
    pub fn schedule(&self) -> Vec<f64> {
        linear_schedule(self.n_temps)
    }
}

pub fn linear_schedule(n_temps: usize) -> Vec<f64> {
    (0..=n_temps).map(|l| l as f64 / n_temps as f64).collect()
}

/// Weighted AIS output. Flagged particles carry log-weight `-inf`.
#[derive(Clone, Debug)]
pub struct AisOutput {
    pub cloud: ParticleCloud,
    pub flagged: usize,
    pub applications: u64,
}

/// Incremental log-weights of a particle that never moves:
/// `(beta_l - beta_{l-1}) (log pi(x) - log q(x))` for `l = 1..=L`.
pub fn ais_incremental_log_weights(target: &dyn Target, initial: &dyn ProposalModel, x: &[f64], n_temps: usize) -> Vec<f64> {
    let beta = linear_schedule(n_temps);
    let gap = target.log_density(x) - initial.log_density(x);
    beta.windows(2).map(|w| (w[1] - w[0]) * gap).collect()
}

/// Annealed importance sampling from `initial` to `target`. At temperature
/// `l` each particle first accumulates its incremental weight, then takes
/// `kernel.n_steps` RW steps targeting `q^{1 - beta_l} pi^{beta_l}`. No
/// resampling.
pub fn run_ais(target: &dyn Target, initial: &dyn ProposalModel, cfg: &AisConfig, stream: SeedStream) -> Result<AisOutput, BaselineError> {
    cfg.validate()?;
    if initial.dim() != target.dim() {
        return Err(BaselineError::Dimension(initial.dim(), target.dim()));
    }
    let beta = cfg.schedule();
    let start = initial.sample(cfg.n_particles, stream.child(purpose::SAMPLE));
    let kstream = stream.child(purpose::KERNEL);
    let d = target.dim();
    let mut points = start.into_flat();
    let log_weights: Vec<f64> = points
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, x)| {
            let mut rng = kstream.particle(i);
            let mut scratch = vec![0.0; d];
            let mut log_w = 0.0;
            for l in 1..beta.len() {
                log_w += (beta[l] - beta[l - 1]) * (target.log_density(x) - initial.log_density(x));
                let b = beta[l];
                let tempered = |y: &[f64]| (1.0 - b) * initial.log_density(y) + b * target.log_density(y);
                let mut log_p = tempered(x);
                for _ in 0..cfg.kernel.n_steps {
                    rw_step_with(&tempered, x, &mut log_p, cfg.kernel.step, &mut rng, &mut scratch);
                }
            }
            if log_w.is_finite() && x.iter().all(|v| v.is_finite()) {
                log_w
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let flagged = log_weights.iter().filter(|w| **w == f64::NEG_INFINITY).count();
    Ok(AisOutput {
        cloud: ParticleCloud::with_log_weights(d, points, log_weights).expect("consistent shape"),
        flagged,
        applications: (cfg.n_particles * cfg.n_temps * cfg.kernel.n_steps) as u64,
    })
}
