//! Benchmark target densities.
//!
//! All targets are unnormalized log-densities; none of the algorithms need the
//! normalizing constant. Mixture targets sample their reference exactly, the
//! two-dimensional geometric targets sample it by rejection from a bounding
//! box.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::ParticleCloud;
use crate::gaussian::{GaussianMixture, GaussianMixture2D, MixtureError};
use crate::linalg::{log_sum_exp, softplus};
use crate::rng::SeedStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("point has dimension {got}, target has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target `{0}` does not provide a gradient")]
    NoGradient(String),
    #[error("gradient undefined at singular point")]
    Singular,
    #[error("target `{0}` has no reference sampler")]
    NoReferenceSampler(String),
    #[error("tensor targets need an even dimension >= 2, got {0}")]
    OddDimension(usize),
    #[error("rejection acceptance rate {rate:.2e} below 1e-4: envelope too loose")]
    EnvelopeTooLoose { rate: f64 },
    #[error("invalid target parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// An unnormalized density on R^dim.
///
/// Implementations must be pure: the crate evaluates targets from many
/// threads at once.
pub trait Target: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Unnormalized log-density. Callers guarantee `x.len() == dim()`; use
    /// [`log_density`] for a checked call.
    fn log_density(&self, x: &[f64]) -> f64;

    fn has_gradient(&self) -> bool {
        false
    }

    fn grad_log_density(&self, _x: &[f64], _grad: &mut [f64]) -> Result<(), TargetError> {
        Err(TargetError::NoGradient(self.name().to_string()))
    }

    /// `n` i.i.d. draws from the normalized target.
    fn sample_reference(&self, _n: usize, _stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        Err(TargetError::NoReferenceSampler(self.name().to_string()))
    }
}

/// Dimension-checked log-density.
pub fn log_density(target: &dyn Target, x: &[f64]) -> Result<f64, TargetError> {
    check_dim(target, x)?;
    Ok(target.log_density(x))
}

/// Dimension-checked gradient.
pub fn grad_log_density(target: &dyn Target, x: &[f64]) -> Result<Vec<f64>, TargetError> {
    check_dim(target, x)?;
    let mut g = vec![0.0; x.len()];
    target.grad_log_density(x, &mut g)?;
    Ok(g)
}

fn check_dim(target: &dyn Target, x: &[f64]) -> Result<(), TargetError> {
    if x.len() != target.dim() {
        return Err(TargetError::DimensionMismatch { expected: target.dim(), got: x.len() });
    }
    Ok(())
}

fn sample_iid<F>(dim: usize, n: usize, stream: SeedStream, draw: F) -> ParticleCloud
where
    F: Fn(&mut crate::rng::StreamRng, &mut [f64]) + Sync,
{
    let mut points = vec![0.0; n * dim];
    points.par_chunks_mut(dim).enumerate().for_each(|(i, out)| {
        let mut rng = stream.particle(i);
        draw(&mut rng, out);
    });
    ParticleCloud::new(dim, points).expect("shape is consistent by construction")
}

impl<const D: usize> Target for GaussianMixture<D> {
    fn name(&self) -> &str {
        "gaussian_mixture"
    }

    fn dim(&self) -> usize {
        D
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        GaussianMixture::log_density(self, x.try_into().expect("dimension checked by caller"))
    }

    fn has_gradient(&self) -> bool {
        true
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) -> Result<(), TargetError> {
        let g = GaussianMixture::grad_log_density(self, x.try_into().expect("dimension checked by caller"));
        grad.copy_from_slice(&g);
        Ok(())
    }

    fn sample_reference(&self, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        Ok(sample_iid(D, n, stream, |rng, out| out.copy_from_slice(&self.sample(rng))))
    }
}

/// Product of `blocks` copies of a 2D mixture over coordinate pairs
/// `(x[2j], x[2j+1])`.
#[derive(Clone, Debug)]
pub struct TensorTarget {
    name: String,
    base: GaussianMixture2D,
    blocks: usize,
}

impl TensorTarget {
    pub fn base(&self) -> &GaussianMixture2D {
        &self.base
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }
}

/// The tensor target `base^{d/2}`.
pub fn make_tensor_target(base: GaussianMixture2D, d: usize) -> Result<TensorTarget, TargetError> {
    make_named_tensor_target("tensor", base, d)
}

fn make_named_tensor_target(name: &str, base: GaussianMixture2D, d: usize) -> Result<TensorTarget, TargetError> {
    if d < 2 || d % 2 != 0 {
        return Err(TargetError::OddDimension(d));
    }
    Ok(TensorTarget { name: format!("{name}-d{d}"), base, blocks: d / 2 })
}

impl Target for TensorTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        2 * self.blocks
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for pair in x.chunks_exact(2) {
            total += self.base.log_density(&[pair[0], pair[1]]);
        }
        total
    }

    fn has_gradient(&self) -> bool {
        true
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) -> Result<(), TargetError> {
        for (pair, g) in x.chunks_exact(2).zip(grad.chunks_exact_mut(2)) {
            g.copy_from_slice(&self.base.grad_log_density(&[pair[0], pair[1]]));
        }
        Ok(())
    }

    fn sample_reference(&self, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        Ok(sample_iid(self.dim(), n, stream, |rng, out| {
            for pair in out.chunks_exact_mut(2) {
                pair.copy_from_slice(&self.base.sample(rng));
            }
        }))
    }
}

/// `N(mean, sd^2 I)`, unnormalized.
#[derive(Clone, Debug)]
pub struct IsotropicGaussian {
    pub mean: Vec<f64>,
    pub sd: f64,
}

impl IsotropicGaussian {
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: 1.0 }
    }
}

impl Target for IsotropicGaussian {
    fn name(&self) -> &str {
        "isotropic_gaussian"
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let q: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * q / (self.sd * self.sd)
    }

    fn has_gradient(&self) -> bool {
        true
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) -> Result<(), TargetError> {
        let prec = 1.0 / (self.sd * self.sd);
        for ((g, a), m) in grad.iter_mut().zip(x).zip(&self.mean) {
            *g = -(a - m) * prec;
        }
        Ok(())
    }

    fn sample_reference(&self, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        Ok(sample_iid(self.dim(), n, stream, |rng, out| {
            for (o, m) in out.iter_mut().zip(&self.mean) {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *o = m + self.sd * z;
            }
        }))
    }
}

/// Which reading of the dual-moons density to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MoonsForm {
    /// `(1 + e^{4 x1 / a}) exp{-(|x| - r)^2 / b - (x1 - 2)^2 / (2a)}` with the
    /// plus sign in the exponent. This places a single blob on the positive
    /// x1 axis.
    Printed,
    /// `(1 + e^{-4 |x1| / a}) exp{-(|x| - r)^2 / b - (|x1| - 2)^2 / (2a)}`,
    /// which equals `e^{-(|x| - r)^2 / b} (e^{-(x1 - 2)^2 / 2a} + e^{-(x1 + 2)^2 / 2a})`:
    /// two moons mirrored across the x2 axis.
    #[default]
    Symmetric,
}

/// Dual-moons density on R^2 with ring radius `radius`.
#[derive(Clone, Debug)]
pub struct DualMoons {
    pub a: f64,
    pub b: f64,
    pub radius: f64,
    pub form: MoonsForm,
}

impl Default for DualMoons {
    fn default() -> Self {
        Self { a: 0.09, b: 0.08, radius: 1.0, form: MoonsForm::Symmetric }
    }
}

impl Target for DualMoons {
    fn name(&self) -> &str {
        "dual_moons"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let r = x[0].hypot(x[1]);
        let ring = -(r - self.radius).powi(2) / self.b;
        match self.form {
            MoonsForm::Printed => softplus(4.0 * x[0] / self.a) + ring - (x[0] - 2.0).powi(2) / (2.0 * self.a),
            MoonsForm::Symmetric => {
                let u = x[0].abs();
                softplus(-4.0 * u / self.a) + ring - (u - 2.0).powi(2) / (2.0 * self.a)
            }
        }
    }

    fn has_gradient(&self) -> bool {
        true
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) -> Result<(), TargetError> {
        let r = x[0].hypot(x[1]);
        if r == 0.0 {
            return Err(TargetError::Singular);
        }
        let dring = -2.0 * (r - self.radius) / self.b / r;
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let dx1 = match self.form {
            MoonsForm::Printed => sigmoid(4.0 * x[0] / self.a) * 4.0 / self.a - (x[0] - 2.0) / self.a,
            MoonsForm::Symmetric => {
                let s = x[0].signum();
                let u = x[0].abs();
                s * (-sigmoid(-4.0 * u / self.a) * 4.0 / self.a - (u - 2.0) / self.a)
            }
        };
        grad[0] = dx1 + dring * x[0];
        grad[1] = dring * x[1];
        Ok(())
    }

    fn sample_reference(&self, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        RejectionSampler::on_box(self, [-3.0, -3.0], [3.0, 3.0])?.sample(self, n, stream)
    }
}

/// Smallest radius used in the `1/|x|` factor of [`TwoRings`].
pub const RING_RADIUS_FLOOR: f64 = 1e-8;

/// Two concentric rings of radii 1 and 4 with radial width `sigma`.
#[derive(Clone, Debug)]
pub struct TwoRings {
    pub sigma: f64,
}

impl Default for TwoRings {
    fn default() -> Self {
        Self { sigma: 0.1 }
    }
}

impl TwoRings {
    const RADII: [f64; 2] = [1.0, 4.0];
}

impl Target for TwoRings {
    fn name(&self) -> &str {
        "two_rings"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let r = x[0].hypot(x[1]);
        let s2 = 2.0 * self.sigma * self.sigma;
        let terms = Self::RADII.map(|k| -(r - k).powi(2) / s2);
        -r.max(RING_RADIUS_FLOOR).ln() + log_sum_exp(&terms)
    }

    fn has_gradient(&self) -> bool {
        true
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) -> Result<(), TargetError> {
        let r = x[0].hypot(x[1]);
        if r < RING_RADIUS_FLOOR {
            return Err(TargetError::Singular);
        }
        let s2 = self.sigma * self.sigma;
        let terms = Self::RADII.map(|k| -(r - k).powi(2) / (2.0 * s2));
        let lse = log_sum_exp(&terms);
        let dr = -1.0 / r
            + Self::RADII
                .iter()
                .zip(terms)
                .map(|(k, t)| (t - lse).exp() * (-(r - k) / s2))
                .sum::<f64>();
        grad[0] = dr * x[0] / r;
        grad[1] = dr * x[1] / r;
        Ok(())
    }

    fn sample_reference(&self, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        RejectionSampler::on_box(self, [-5.0, -5.0], [5.0, 5.0])?.sample(self, n, stream)
    }
}

/// Uniform-envelope rejection sampler on an axis-aligned 2D box.
#[derive(Clone, Debug)]
pub struct RejectionSampler {
    lo: [f64; 2],
    hi: [f64; 2],
    log_envelope: f64,
}

impl RejectionSampler {
    const GRID: usize = 1000;
    const MARGIN: f64 = 1.1;
    const MIN_RATE: f64 = 1e-4;
    const MAX_ATTEMPTS_PER_DRAW: usize = 1_000_000;

    /// Envelope = 1.1 x the maximum of the density over a 1000 x 1000 grid of
    /// cell centres.
    pub fn on_box(target: &dyn Target, lo: [f64; 2], hi: [f64; 2]) -> Result<Self, TargetError> {
        let hx = (hi[0] - lo[0]) / Self::GRID as f64;
        let hy = (hi[1] - lo[1]) / Self::GRID as f64;
        let max = (0..Self::GRID)
            .into_par_iter()
            .map(|i| {
                let x = lo[0] + (i as f64 + 0.5) * hx;
                (0..Self::GRID)
                    .map(|j| target.log_density(&[x, lo[1] + (j as f64 + 0.5) * hy]))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .reduce(|| f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(TargetError::InvalidParameter("density vanishes on the sampling box".into()));
        }
        Ok(Self { lo, hi, log_envelope: max + Self::MARGIN.ln() })
    }

    pub fn sample(&self, target: &dyn Target, n: usize, stream: SeedStream) -> Result<ParticleCloud, TargetError> {
        let results: Vec<Option<([f64; 2], usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.particle(i);
                for attempt in 1..=Self::MAX_ATTEMPTS_PER_DRAW {
                    let p = [rng.random_range(self.lo[0]..self.hi[0]), rng.random_range(self.lo[1]..self.hi[1])];
                    let u: f64 = rng.random();
                    if u.ln() < target.log_density(&p) - self.log_envelope {
                        return Some((p, attempt));
                    }
                }
                None
            })
            .collect();
        let mut points = Vec::with_capacity(2 * n);
        let mut attempts = 0usize;
        for r in results {
            match r {
                Some((p, a)) => {
                    points.extend_from_slice(&p);
                    attempts += a;
                }
                None => return Err(TargetError::EnvelopeTooLoose { rate: 1.0 / Self::MAX_ATTEMPTS_PER_DRAW as f64 }),
            }
        }
        if n > 0 {
            let rate = n as f64 / attempts as f64;
            if rate < Self::MIN_RATE {
                return Err(TargetError::EnvelopeTooLoose { rate });
            }
        }
        Ok(ParticleCloud::new(2, points).expect("2D points"))
    }
}

/// `0.2 N(0, I) + 0.8 N((20, 20), [[10, -4], [-4, 3]])`.
pub fn gm2() -> GaussianMixture2D {
    GaussianMixture::new(
        &[0.2, 0.8],
        &[[0.0, 0.0], [20.0, 20.0]],
        &[[[1.0, 0.0], [0.0, 1.0]], [[10.0, -4.0], [-4.0, 3.0]]],
    )
    .expect("valid constant mixture")
}

/// Four equally weighted anisotropic components.
pub fn gm4() -> GaussianMixture2D {
    let cov = [[3.0, 4.0], [4.0, 10.0]];
    GaussianMixture::new(
        &[0.25; 4],
        &[[-10.0, 10.0], [10.0, -10.0], [15.0, 15.0], [-15.0, -15.0]],
        &[cov; 4],
    )
    .expect("valid constant mixture")
}

/// 5 x 5 grid of isotropic components with spacing 5 and variance 0.25.
///
/// The published weights are 0.2 per component, which sums to 5; they are
/// taken as equal weights 1/25 (the normalization does not change the
/// unnormalized density up to a constant).
pub fn gm25() -> GaussianMixture2D {
    let means: Vec<[f64; 2]> = (0..5).flat_map(|l| (0..5).map(move |k| [5.0 * l as f64, 5.0 * k as f64])).collect();
    GaussianMixture::new(&[1.0 / 25.0; 25], &means, &[[[0.25, 0.0], [0.0, 0.25]]; 25]).expect("valid constant mixture")
}

/// `0.5 N(0, 1) + 0.5 N(10, 1)` on the real line.
pub fn bimodal_1d() -> GaussianMixture<1> {
    GaussianMixture::new(&[0.5, 0.5], &[[0.0], [10.0]], &[[[1.0]], [[1.0]]]).expect("valid constant mixture")
}

/// Registry id of a benchmark target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetId {
    Gm2,
    Gm4,
    Gm25,
    DualMoons,
    TwoRings,
    #[serde(alias = "bimodal")]
    Bimodal1d,
}

/// A target id plus optional parameter overrides, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub id: TargetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<MoonsForm>,
}

impl TargetSpec {
    pub fn new(id: TargetId) -> Self {
        Self { id, d: None, sigma: None, a: None, b: None, radius: None, form: None }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = Some(d);
        self
    }

    /// Ambient dimension after defaults.
    pub fn dim(&self) -> usize {
        match self.id {
            TargetId::Gm2 | TargetId::Gm4 | TargetId::Gm25 => self.d.unwrap_or(2),
            TargetId::DualMoons | TargetId::TwoRings => 2,
            TargetId::Bimodal1d => 1,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Target>, TargetError> {
        let positive = |name: &str, v: Option<f64>, default: f64| match v {
            Some(x) if !(x > 0.0) || !x.is_finite() => {
                Err(TargetError::InvalidParameter(format!("{name} must be positive, got {x}")))
            }
            Some(x) => Ok(x),
            None => Ok(default),
        };
        let fixed_dim = |expected: usize| match self.d {
            Some(d) if d != expected => {
                Err(TargetError::InvalidParameter(format!("{:?} has fixed dimension {expected}, got d = {d}", self.id)))
            }
            _ => Ok(()),
        };
        Ok(match self.id {
            TargetId::Gm2 => Arc::new(make_named_tensor_target("gm2", gm2(), self.dim())?),
            TargetId::Gm4 => Arc::new(make_named_tensor_target("gm4", gm4(), self.dim())?),
            TargetId::Gm25 => Arc::new(make_named_tensor_target("gm25", gm25(), self.dim())?),
            TargetId::DualMoons => {
                fixed_dim(2)?;
                Arc::new(DualMoons {
                    a: positive("a", self.a, 0.09)?,
                    b: positive("b", self.b, 0.08)?,
                    radius: positive("radius", self.radius, 1.0)?,
                    form: self.form.unwrap_or_default(),
                })
            }
            TargetId::TwoRings => {
                fixed_dim(2)?;
                Arc::new(TwoRings { sigma: positive("sigma", self.sigma, 0.1)? })
            }
            TargetId::Bimodal1d => {
                fixed_dim(1)?;
                Arc::new(bimodal_1d())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference(target: &dyn Target, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (target.log_density(&xp) - target.log_density(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_gradient_consistent(target: &dyn Target, points: &ParticleCloud) {
        for x in points.points() {
            let g = grad_log_density(target, x).unwrap();
            let fd = finite_difference(target, x);
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-4 * norm.max(1.0), "{}: grad {g:?} vs fd {fd:?}", target.name());
        }
    }

    #[test]
    fn standard_normal_unnormalized_at_zero() {
        let t = IsotropicGaussian::standard(1);
        assert_eq!(log_density(&t, &[0.0]).unwrap(), 0.0);
        assert_eq!(grad_log_density(&t, &[1.5]).unwrap(), vec![-1.5]);
        assert_eq!(
            log_density(&t, &[0.0, 1.0]),
            Err(TargetError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn gm25_at_origin_matches_direct_summation() {
        // Independent oracle: plain (non log-space) summation over the grid.
        let mut direct = 0.0;
        for l in 0..5 {
            for k in 0..5 {
                let (mx, my) = (5.0 * l as f64, 5.0 * k as f64);
                let q = (mx * mx + my * my) / 0.25;
                direct += (1.0 / 25.0) * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * 0.25);
            }
        }
        let v = gm25().log_density(&[0.0, 0.0]);
        assert!((v - direct.ln()).abs() < 1e-12, "{v} vs {}", direct.ln());
    }

    #[test]
    fn two_rings_on_inner_ring() {
        let t = TwoRings::default();
        let v = t.log_density(&[1.0, 0.0]);
        assert!(v.abs() < 1e-15);
        assert!((v - (1.0 + (-450.0f64).exp()).ln()).abs() < 1e-15);
        assert!(t.log_density(&[0.0, 0.0]).is_finite());
        assert_eq!(grad_log_density(&t, &[0.0, 0.0]), Err(TargetError::Singular));
    }

    #[test]
    fn dual_moons_printed_form_is_finite_far_out() {
        let t = DualMoons { form: MoonsForm::Printed, ..DualMoons::default() };
        for x in [[-100.0, 0.0], [100.0, 3.0], [0.0, -100.0]] {
            assert!(t.log_density(&x).is_finite());
        }
        // Literal formula at a moderate point.
        let x = [0.3, 0.8];
        let r = (0.3f64 * 0.3 + 0.8 * 0.8).sqrt();
        let lit = (1.0 + (4.0 * 0.3 / 0.09f64).exp()).ln() - (r - 1.0).powi(2) / 0.08 - (0.3f64 - 2.0).powi(2) / 0.18;
        assert!((t.log_density(&x) - lit).abs() < 1e-12);
    }

    #[test]
    fn symmetric_moons_are_mirror_symmetric() {
        let t = DualMoons::default();
        for x in [[0.7, 0.2], [1.3, -0.4], [0.01, 1.0]] {
            assert!((t.log_density(&x) - t.log_density(&[-x[0], x[1]])).abs() < 1e-12);
            let r = x[0].hypot(x[1]);
            let sum = (-(x[0] - 2.0).powi(2) / 0.18).exp() + (-(x[0] + 2.0).powi(2) / 0.18).exp();
            let oracle = -(r - 1.0).powi(2) / 0.08 + sum.ln();
            assert!((t.log_density(&x) - oracle).abs() < 1e-12, "{x:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn tensor_density_is_left_to_right_block_sum(
            which in 0usize..3,
            pairs in proptest::collection::vec((-25.0f64..25.0, -25.0f64..25.0), 1..12),
        ) {
            let x: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            let base = [gm2(), gm4(), gm25()][which].clone();
            let t = make_tensor_target(base.clone(), x.len()).unwrap();
            let mut expected = 0.0;
            for j in 0..x.len() / 2 {
                expected += base.log_density(&[x[2 * j], x[2 * j + 1]]);
            }
            proptest::prop_assert_eq!(t.log_density(&x), expected);
            proptest::prop_assert_eq!(t.dim(), 2 * t.blocks());
        }
    }

    #[test]
    fn tensor_target_is_additive() {
        let base = gm4();
        let t2 = make_tensor_target(base.clone(), 2).unwrap();
        let t4 = make_tensor_target(base.clone(), 4).unwrap();
        for (a, b) in [(0.0, 0.0), (3.0, -2.0), (15.0, 14.0)] {
            let single = base.log_density(&[a, b]);
            assert_eq!(t2.log_density(&[a, b]), single);
            assert_eq!(t4.log_density(&[a, b, a, b]), single + single);
        }
        assert_eq!(make_tensor_target(base, 3).unwrap_err(), TargetError::OddDimension(3));
    }

    #[test]
    fn gradients_match_finite_differences_on_reference_samples() {
        let stream = SeedStream::new(11);
        let targets: Vec<Arc<dyn Target>> = vec![
            TargetSpec::new(TargetId::Gm2).with_dim(4).build().unwrap(),
            TargetSpec::new(TargetId::Gm4).with_dim(4).build().unwrap(),
            TargetSpec::new(TargetId::Gm25).with_dim(2).build().unwrap(),
            TargetSpec::new(TargetId::TwoRings).build().unwrap(),
            TargetSpec::new(TargetId::DualMoons).build().unwrap(),
            Arc::new(DualMoons { form: MoonsForm::Printed, ..DualMoons::default() }),
            TargetSpec::new(TargetId::Bimodal1d).build().unwrap(),
        ];
        for t in targets {
            let pts = t.sample_reference(100, stream.child(t.dim() as u64)).unwrap();
            assert_gradient_consistent(t.as_ref(), &pts);
        }
    }

    #[test]
    fn single_gaussian_gradient() {
        let g = GaussianMixture::<2>::gaussian([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let x = [0.3, 0.4];
        let grad = grad_log_density(&g, &x).unwrap();
        // -S^{-1}(x - m) with S^{-1} = [[1, -0.5], [-0.5, 2]] / 1.75
        let d = [x[0] - 1.0, x[1] + 1.0];
        let expected = [-(d[0] - 0.5 * d[1]) / 1.75, -(-0.5 * d[0] + 2.0 * d[1]) / 1.75];
        assert!((grad[0] - expected[0]).abs() < 1e-12 && (grad[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn mixtures_do_not_overflow_within_radius_100() {
        for t in [gm2(), gm4(), gm25()] {
            for x in [[100.0, 0.0], [-70.0, 70.0], [0.0, -100.0]] {
                assert!(t.log_density(&x).is_finite());
            }
        }
    }

    #[test]
    fn gm2_reference_component_frequency() {
        // Exact sampler: count points nearer the (0,0) component in Mahalanobis terms.
        let base = gm2();
        let pts = base.sample_reference(100_000, SeedStream::new(3)).unwrap();
        let near_origin = pts.points().filter(|p| p[0].hypot(p[1]) < 8.0).count();
        let f = near_origin as f64 / pts.len() as f64;
        assert!((f - 0.2).abs() < 0.01, "{f}");
    }

    #[test]
    fn gm4_d10_block_frequencies() {
        let t = TargetSpec::new(TargetId::Gm4).with_dim(10).build().unwrap();
        let pts = t.sample_reference(100_000, SeedStream::new(5)).unwrap();
        let means = gm4().means();
        for block in 0..5 {
            let mut counts = [0usize; 4];
            for p in pts.points() {
                let (x, y) = (p[2 * block], p[2 * block + 1]);
                let nearest = (0..4)
                    .min_by(|&a, &b| {
                        let da = (x - means[a][0]).powi(2) + (y - means[a][1]).powi(2);
                        let db = (x - means[b][0]).powi(2) + (y - means[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                counts[nearest] += 1;
            }
            for c in counts {
                assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.02);
            }
        }
    }

    #[test]
    fn two_rings_reference_is_bimodal_in_radius() {
        let t = TwoRings::default();
        let pts = t.sample_reference(10_000, SeedStream::new(9)).unwrap();
        let radii: Vec<f64> = pts.points().map(|p| p[0].hypot(p[1])).collect();
        let inner = radii.iter().filter(|r| (**r - 1.0).abs() < 0.4).count() as f64 / 1e4;
        let outer = radii.iter().filter(|r| (**r - 4.0).abs() < 0.4).count() as f64 / 1e4;
        let between = radii.iter().filter(|r| **r > 2.0 && **r < 3.0).count();
        assert!((inner - 0.5).abs() < 0.03 && (outer - 0.5).abs() < 0.03, "{inner} {outer}");
        assert_eq!(between, 0);
    }

    #[test]
    fn dual_moons_reference_samples_are_in_support() {
        for form in [MoonsForm::Printed, MoonsForm::Symmetric] {
            let t = DualMoons { form, ..DualMoons::default() };
            let pts = t.sample_reference(10_000, SeedStream::new(2)).unwrap();
            assert!(pts.points().all(|p| t.log_density(p) > f64::NEG_INFINITY));
        }
    }

    #[test]
    fn registry_validates_parameters() {
        assert!(TargetSpec::new(TargetId::Gm4).with_dim(5).build().is_err());
        let mut s = TargetSpec::new(TargetId::TwoRings);
        s.sigma = Some(-1.0);
        assert!(matches!(s.build(), Err(TargetError::InvalidParameter(_))));
        assert!(TargetSpec::new(TargetId::DualMoons).with_dim(4).build().is_err());
        assert_eq!(TargetSpec::new(TargetId::Gm25).with_dim(4).build().unwrap().dim(), 4);
    }
}
