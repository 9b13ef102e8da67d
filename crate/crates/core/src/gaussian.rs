//! Full-covariance Gaussian mixtures in a fixed small dimension.
//!
//! `GaussianMixture<2>` is both the base of the benchmark tensor targets and
//! the block type of the tensorized projection family. `GaussianMixture<1>`
//! serves the univariate bimodal study.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{
    add_diagonal, backward_substitute_transpose, cholesky, forward_substitute, log_det_from_cholesky,
    lower_mul, LogSumExp, Matrix, Vector,
};

/// Two-dimensional mixture; the block type of tensor targets and models.
pub type GaussianMixture2D = GaussianMixture<2>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("weights must be finite and non-negative (component {0})")]
    BadWeight(usize),
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("covariance of component {0} is not symmetric positive definite")]
    NotPositiveDefinite(usize),
    #[error("mean of component {0} is not finite")]
    BadMean(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component<const D: usize> {
    pub weight: f64,
    pub mean: Vector<D>,
    pub cov: Matrix<D>,
    chol: Matrix<D>,
    // log(weight) - 0.5 * log det(2 pi cov)
    log_scale: f64,
}

impl<const D: usize> Component<D> {
    fn new(index: usize, weight: f64, mean: Vector<D>, cov: Matrix<D>) -> Result<Self, MixtureError> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(MixtureError::BadWeight(index));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(MixtureError::BadMean(index));
        }
        let symmetric = (0..D).all(|i| (0..D).all(|j| (cov[i][j] - cov[j][i]).abs() <= 1e-12 * (1.0 + cov[i][j].abs())));
        if !symmetric {
            return Err(MixtureError::NotPositiveDefinite(index));
        }
        let chol = cholesky(&cov).ok_or(MixtureError::NotPositiveDefinite(index))?;
        let log_scale = weight.ln()
            - 0.5 * (D as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_from_cholesky(&chol));
        Ok(Self { weight, mean, cov, chol, log_scale })
    }

    /// `log(weight * N(x | mean, cov))`.
    #[inline]
    pub fn weighted_log_density(&self, x: &Vector<D>) -> f64 {
        let mut diff = [0.0; D];
        for i in 0..D {
            diff[i] = x[i] - self.mean[i];
        }
        let y = forward_substitute(&self.chol, &diff);
        let maha: f64 = y.iter().map(|v| v * v).sum();
        self.log_scale - 0.5 * maha
    }

    /// `cov^{-1} (x - mean)`.
    #[inline]
    pub fn precision_times_offset(&self, x: &Vector<D>) -> Vector<D> {
        let mut diff = [0.0; D];
        for i in 0..D {
            diff[i] = x[i] - self.mean[i];
        }
        backward_substitute_transpose(&self.chol, &forward_substitute(&self.chol, &diff))
    }

    pub fn cholesky_factor(&self) -> &Matrix<D> {
        &self.chol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture<const D: usize> {
    components: Vec<Component<D>>,
    cumulative: Vec<f64>,
}

impl<const D: usize> GaussianMixture<D> {
    /// Builds a mixture; weights must sum to one within `1e-9`. Sums further
    /// than `1e-14` from one are renormalized, so parameters that are already
    /// normalized pass through bit for bit.
    pub fn new(weights: &[f64], means: &[Vector<D>], covs: &[Matrix<D>]) -> Result<Self, MixtureError> {
        assert_eq!(weights.len(), means.len(), "weights/means length mismatch");
        assert_eq!(weights.len(), covs.len(), "weights/covs length mismatch");
        if weights.is_empty() {
            return Err(MixtureError::Empty);
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(MixtureError::BadWeight(i));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MixtureError::WeightSum(total));
        }
        let scale = if (total - 1.0).abs() > 1e-14 { total } else { 1.0 };
        let components = weights
            .iter()
            .zip(means)
            .zip(covs)
            .enumerate()
            .map(|(i, ((&w, &m), &c))| Component::new(i, w / scale, m, c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_components(components))
    }

    /// As [`new`](Self::new), but a covariance that fails its Cholesky
    /// factorization gets `1e-3 * I` added once before giving up.
    pub fn new_regularized(weights: &[f64], means: &[Vector<D>], covs: &[Matrix<D>]) -> Result<Self, MixtureError> {
        match Self::new(weights, means, covs) {
            Err(MixtureError::NotPositiveDefinite(_)) => {
                let fixed: Vec<Matrix<D>> = covs
                    .iter()
                    .map(|c| if cholesky(c).is_some() { *c } else { add_diagonal(c, 1e-3) })
                    .collect();
                Self::new(weights, means, &fixed)
            }
            other => other,
        }
    }

    /// A single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vector<D>, cov: Matrix<D>) -> Result<Self, MixtureError> {
        Self::new(&[1.0], &[mean], &[cov])
    }

    fn from_components(components: Vec<Component<D>>) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Self { components, cumulative }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component<D>] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vector<D>> {
        self.components.iter().map(|c| c.mean).collect()
    }

    pub fn covariances(&self) -> Vec<Matrix<D>> {
        self.components.iter().map(|c| c.cov).collect()
    }

    /// Normalized log-density, evaluated with log-sum-exp over components.
    #[inline]
    pub fn log_density(&self, x: &Vector<D>) -> f64 {
        let mut acc = LogSumExp::default();
        for c in &self.components {
            acc.push(c.weighted_log_density(x));
        }
        acc.value()
    }

    /// Writes `log(w_k N(x | m_k, S_k))` for each component into `out`.
    #[inline]
    pub fn component_log_densities(&self, x: &Vector<D>, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weighted_log_density(x);
        }
    }

    /// Gradient of the log-density: the responsibility-weighted sum of the
    /// component scores `-S_k^{-1}(x - m_k)`.
    pub fn grad_log_density(&self, x: &Vector<D>) -> Vector<D> {
        let mut logs = vec![0.0; self.components.len()];
        self.component_log_densities(x, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut grad = [0.0; D];
        for (c, &l) in self.components.iter().zip(&logs) {
            let r = (l - max).exp();
            total += r;
            let p = c.precision_times_offset(x);
            for i in 0..D {
                grad[i] -= r * p[i];
            }
        }
        for g in &mut grad {
            *g /= total;
        }
        grad
    }

    /// Index of a component drawn from the mixture weights.
    #[inline]
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c <= u).min(self.components.len() - 1)
    }

    #[inline]
    pub fn sample_from_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vector<D> {
        let c = &self.components[k];
        let mut z = [0.0; D];
        for zi in &mut z {
            *zi = rng.sample(StandardNormal);
        }
        let lz = lower_mul(&c.chol, &z);
        let mut out = c.mean;
        for i in 0..D {
            out[i] += lz[i];
        }
        out
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector<D> {
        let k = self.sample_component(rng);
        self.sample_from_component(k, rng)
    }
}
