//! Exploration kernels: random-walk Metropolis and the unadjusted Langevin
//! algorithm, applied a fixed number of steps per particle.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::ParticleCloud;
use crate::rng::{SeedStream, StreamRng};
use crate::targets::{Target, TargetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("kernel needs at least one step")]
    ZeroSteps,
    #[error("ULA needs a gradient: {0}")]
    Unsupported(TargetError),
    #[error("{flagged} of {total} particles diverged (limit 1%)")]
    Divergence { flagged: usize, total: usize },
    #[error("local moves must use the random-walk kernel")]
    LocalMoveNotRw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[serde(alias = "RW", alias = "random_walk")]
    Rw,
    #[serde(alias = "ULA", alias = "langevin")]
    Ula,
}

/// Kernel kind, step size (`sigma` for RW, `gamma` for ULA) and number of
/// steps per application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub step: f64,
    pub n_steps: usize,
}

impl KernelSpec {
    pub fn rw(sigma: f64, n_steps: usize) -> Self {
        Self { kind: KernelKind::Rw, step: sigma, n_steps }
    }

    pub fn ula(gamma: f64, n_steps: usize) -> Self {
        Self { kind: KernelKind::Ula, step: gamma, n_steps }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(KernelError::BadStep(self.step));
        }
        if self.n_steps == 0 {
            return Err(KernelError::ZeroSteps);
        }
        Ok(())
    }
}

/// One Metropolis step with an isotropic Gaussian proposal against an
/// arbitrary unnormalized log-density. `x` and `log_p` are updated in place;
/// `proposal` is scratch space of the same length. Returns whether the move
/// was accepted.
#[inline]
pub fn rw_step_with<F>(log_density: &F, x: &mut [f64], log_p: &mut f64, sigma: f64, rng: &mut StreamRng, proposal: &mut [f64]) -> bool
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    for (p, xi) in proposal.iter_mut().zip(x.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        *p = xi + sigma * z;
    }
    let u: f64 = rng.random();
    let log_new = log_density(proposal);
    let log_ratio = log_new - *log_p;
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 || u.ln() < log_ratio {
        x.copy_from_slice(proposal);
        *log_p = log_new;
        true
    } else {
        false
    }
}

/// One random-walk Metropolis step targeting `target`.
pub fn rw_step(target: &dyn Target, x: &[f64], sigma: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut log_p = target.log_density(x);
    let mut scratch = vec![0.0; x.len()];
    rw_step_with(&|y: &[f64]| target.log_density(y), &mut out, &mut log_p, sigma, rng, &mut scratch);
    out
}

/// One ULA step in place; `grad` is scratch space.
#[inline]
fn ula_step_in_place(target: &dyn Target, x: &mut [f64], gamma: f64, rng: &mut StreamRng, grad: &mut [f64]) -> Result<(), TargetError> {
    target.grad_log_density(x, grad)?;
    let noise = (2.0 * gamma).sqrt();
    for (xi, g) in x.iter_mut().zip(grad.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        *xi += gamma * g + noise * z;
    }
    Ok(())
}

/// `x + gamma grad log pi(x) + sqrt(2 gamma) z`.
pub fn ula_step(target: &dyn Target, x: &[f64], gamma: f64, rng: &mut StreamRng) -> Result<Vec<f64>, TargetError> {
    if !target.has_gradient() {
        return Err(TargetError::NoGradient(target.name().to_string()));
    }
    let mut out = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    ula_step_in_place(target, &mut out, gamma, rng, &mut grad)?;
    Ok(out)
}

/// Runs `spec.n_steps` kernel steps from `x` in place. Returns `false` if the
/// particle left the finite domain (or hit a gradient singularity).
pub fn propagate_particle(spec: &KernelSpec, target: &dyn Target, x: &mut [f64], rng: &mut StreamRng) -> bool {
    let mut scratch = vec![0.0; x.len()];
    match spec.kind {
        KernelKind::Rw => {
            let mut log_p = target.log_density(x);
            let density = |y: &[f64]| target.log_density(y);
            for _ in 0..spec.n_steps {
                rw_step_with(&density, x, &mut log_p, spec.step, rng, &mut scratch);
            }
            x.iter().all(|v| v.is_finite())
        }
        KernelKind::Ula => {
            for _ in 0..spec.n_steps {
                if ula_step_in_place(target, x, spec.step, rng, &mut scratch).is_err() {
                    return false;
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return false;
                }
            }
            true
        }
    }
}

/// Result of pushing a cloud through a kernel.
#[derive(Clone, Debug)]
pub struct KernelOutput {
    /// Propagated cloud. Flagged particles keep their input position and get
    /// weight `-inf`; all other weights are uniform.
    pub cloud: ParticleCloud,
    pub flagged: usize,
    /// Number of single-step transitions performed (N x n_steps).
    pub applications: u64,
}

/// Propagates every particle independently through `spec.n_steps` steps.
/// Particle `i` draws from `stream.particle(i)`, so the result does not depend
/// on the thread count.
pub fn apply_kernel(spec: &KernelSpec, target: &dyn Target, cloud: &ParticleCloud, stream: SeedStream) -> Result<KernelOutput, KernelError> {
    spec.validate()?;
    if spec.kind == KernelKind::Ula && !target.has_gradient() {
        return Err(KernelError::Unsupported(TargetError::NoGradient(target.name().to_string())));
    }
    let dim = cloud.dim();
    let mut points = cloud.as_flat().to_vec();
    let ok: Vec<bool> = points
        .par_chunks_mut(dim)
        .enumerate()
        .map(|(i, x)| {
            let start = x.to_vec();
            let mut rng = stream.particle(i);
            let fine = propagate_particle(spec, target, x, &mut rng);
            if !fine {
                x.copy_from_slice(&start);
            }
            fine
        })
        .collect();
    let flagged = ok.iter().filter(|f| !**f).count();
    let total = cloud.len();
    if flagged * 100 > total {
        return Err(KernelError::Divergence { flagged, total });
    }
    let log_weights = ok.iter().map(|&f| if f { 0.0 } else { f64::NEG_INFINITY }).collect();
    let cloud = ParticleCloud::with_log_weights(dim, points, log_weights).expect("shape preserved");
    Ok(KernelOutput { cloud, flagged, applications: (total * spec.n_steps) as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{IsotropicGaussian, TargetSpec, TargetId};

    struct Flat;

    impl Target for Flat {
        fn name(&self) -> &str {
            "flat"
        }
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0].abs() <= 10.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert_eq!(KernelSpec::rw(1.0, 0).validate(), Err(KernelError::ZeroSteps));
        assert_eq!(KernelSpec::ula(-0.1, 1).validate(), Err(KernelError::BadStep(-0.1)));
        assert!(KernelSpec::rw(0.5, 3).validate().is_ok());
    }

    #[test]
    fn flat_density_always_accepts_inside_box() {
        let mut rng = SeedStream::new(1).rng();
        let mut x = [0.0];
        let mut lp = 0.0;
        let mut scratch = [0.0];
        let density = |y: &[f64]| Flat.log_density(y);
        for _ in 0..1000 {
            assert!(rw_step_with(&density, &mut x, &mut lp, 0.01, &mut rng, &mut scratch));
        }
    }

    #[test]
    fn rw_acceptance_rate_standard_normal() {
        // Reference value from a long-run simulation: about 0.44 at sigma = 2.4.
        let t = IsotropicGaussian::standard(1);
        let mut rng = SeedStream::new(2).rng();
        let mut x = [rng.sample::<f64, _>(StandardNormal)];
        let mut lp = t.log_density(&x);
        let mut scratch = [0.0];
        let density = |y: &[f64]| t.log_density(y);
        let n = 100_000;
        let accepted = (0..n).filter(|_| rw_step_with(&density, &mut x, &mut lp, 2.4, &mut rng, &mut scratch)).count();
        let rate = accepted as f64 / n as f64;
        assert!((rate - 0.44).abs() < 0.03, "{rate}");
    }

    #[test]
    fn ula_one_step_moments() {
        let t = IsotropicGaussian::standard(1);
        let (x, gamma) = (2.0, 0.3);
        let n = 200_000;
        let stream = SeedStream::new(3);
        let draws: Vec<f64> = (0..n).map(|i| ula_step(&t, &[x], gamma, &mut stream.particle(i)).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - (1.0 - gamma) * x).abs() < 4.0 * (2.0 * gamma / n as f64).sqrt());
        assert!((var - 2.0 * gamma).abs() < 0.01 * 2.0 * gamma * 4.0);
    }

    // On N(0, 1) one ULA step is the AR(1) map x' = (1 - g) x + sqrt(2 g) z,
    // whose fixed-point variance solves v = (1 - g)^2 v + 2 g, so
    // v = 2 g / (1 - (1 - g)^2) = 2 / (2 - g).
    fn ula_gaussian_variance(gamma: f64) -> f64 {
        2.0 * gamma / (1.0 - (1.0 - gamma).powi(2))
    }

    #[test]
    fn ula_stationary_variance_on_standard_normal() {
        let t = IsotropicGaussian::standard(1);
        let n = 50_000;
        let mut last = 1.0;
        for (i, gamma) in [0.05f64, 0.1, 0.5].into_iter().enumerate() {
            // (1 - g)^steps < 1e-6 so the start at 0 is forgotten.
            let steps = (14.0 / gamma).ceil() as usize;
            let start = ParticleCloud::new(1, vec![0.0; n]).unwrap();
            let out = apply_kernel(&KernelSpec::ula(gamma, steps), &t, &start, SeedStream::new(40 + i as u64)).unwrap();
            let x = out.cloud.as_flat();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expected = ula_gaussian_variance(gamma);
            assert!((expected - 2.0 / (2.0 - gamma)).abs() < 1e-12);
            assert!((var - expected).abs() < 0.02 * expected, "gamma {gamma}: {var} vs {expected}");
            assert!(var > last, "bias must grow with the step");
            last = var;
        }
    }

    #[test]
    fn ula_tiny_step_is_pure_noise() {
        let t = IsotropicGaussian::standard(1);
        let gamma = 1e-12;
        let mut rng_a = SeedStream::new(4).rng();
        let mut rng_b = rng_a.clone();
        let y = ula_step(&t, &[0.7], gamma, &mut rng_a).unwrap()[0];
        let z: f64 = rng_b.sample(StandardNormal);
        assert!((y - (0.7 + (2.0 * gamma).sqrt() * z)).abs() < 1e-5);
    }

    #[test]
    fn ula_requires_gradient() {
        let cloud = ParticleCloud::new(1, vec![0.0; 4]).unwrap();
        let err = apply_kernel(&KernelSpec::ula(0.1, 1), &Flat, &cloud, SeedStream::new(0)).unwrap_err();
        assert!(matches!(err, KernelError::Unsupported(_)));
    }

    #[test]
    fn rw_tiny_sigma_is_identity() {
        let t = IsotropicGaussian::standard(2);
        let cloud = ParticleCloud::new(2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let out = apply_kernel(&KernelSpec::rw(1e-300, 1), &t, &cloud, SeedStream::new(5)).unwrap();
        assert_eq!(out.cloud.as_flat(), cloud.as_flat());
        assert_eq!(out.applications, 2);
    }

    #[test]
    fn gm4_d10_ula_from_far_start_stays_finite() {
        let t = TargetSpec::new(TargetId::Gm4).with_dim(10).build().unwrap();
        let cloud = ParticleCloud::new(10, vec![30.0; 10 * 2000]).unwrap();
        let out = apply_kernel(&KernelSpec::ula(2.0, 10), t.as_ref(), &cloud, SeedStream::new(6)).unwrap();
        assert!(out.flagged * 100 <= 2000);
        assert!(out.cloud.as_flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ula_divergence_is_reported() {
        // gamma = 5 on N(0, 1): the iterate multiplies by -4 each step.
        let t = IsotropicGaussian::standard(1);
        let cloud = ParticleCloud::new(1, vec![1.0; 100]).unwrap();
        let err = apply_kernel(&KernelSpec::ula(5.0, 2000), &t, &cloud, SeedStream::new(7)).unwrap_err();
        assert_eq!(err, KernelError::Divergence { flagged: 100, total: 100 });
    }

    #[test]
    fn apply_kernel_is_deterministic() {
        let t = TargetSpec::new(TargetId::Gm2).with_dim(4).build().unwrap();
        let cloud = ParticleCloud::new(4, (0..400).map(|i| i as f64 * 0.1).collect()).unwrap();
        let spec = KernelSpec::rw(6.0, 20);
        let a = apply_kernel(&spec, t.as_ref(), &cloud, SeedStream::new(8)).unwrap();
        let b = apply_kernel(&spec, t.as_ref(), &cloud, SeedStream::new(8)).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(cloud.as_flat()[1], 0.1);
    }

    #[test]
    fn rw_preserves_standard_normal() {
        let t = IsotropicGaussian::standard(1);
        let n = 100_000;
        let init = t.sample_reference(n, SeedStream::new(9)).unwrap();
        let out = apply_kernel(&KernelSpec::rw(1.0, 100), &t, &init, SeedStream::new(10)).unwrap().cloud;
        let xs = out.as_flat();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "{mean}");
        assert!((var - 1.0).abs() < 3.0 * se_var, "{var}");
    }

    #[test]
    fn particle_permutation_commutes() {
        // Each output depends only on (input point, stream index), so walking
        // the particles in a permuted order reproduces the parallel result.
        let t = TargetSpec::new(TargetId::Gm4).with_dim(2).build().unwrap();
        let spec = KernelSpec::ula(0.5, 5);
        let stream = SeedStream::new(11);
        let cloud = ParticleCloud::new(2, (0..12).map(|i| i as f64 - 6.0).collect()).unwrap();
        let parallel = apply_kernel(&spec, t.as_ref(), &cloud, stream).unwrap().cloud;
        for src in [3usize, 0, 5, 1, 4, 2] {
            let mut x = cloud.point(src).to_vec();
            assert!(propagate_particle(&spec, t.as_ref(), &mut x, &mut stream.particle(src)));
            assert_eq!(x.as_slice(), parallel.point(src));
        }
    }
}
