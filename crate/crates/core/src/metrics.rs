//! Sample-based discrepancies: sliced Wasserstein-2 and energy distance.
//!
//! Both reductions run in parallel but sum their partial results in a fixed
//! order, so values are bitwise identical for any thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::ParticleCloud;
use crate::rng::SeedStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sample sizes differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("input is not sorted ascending")]
    NotSorted,
    #[error("empty input")]
    Empty,
    #[error("need at least one projection")]
    NoProjections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub n_projections: usize,
    /// Samples per side; `None` uses the benchmark default.
    pub n_samples: Option<usize>,
    pub seed: u64,
    /// Exclude the diagonal from the within-sample energy sums.
    pub unbiased_energy: bool,
    /// Skip the energy distance (it is quadratic in the sample size).
    pub energy: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { n_projections: 100, n_samples: None, seed: 0, unbiased_energy: false, energy: true }
    }
}

/// `sqrt(mean((a_i - b_i)^2))` over sorted samples of equal length.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    if !is_sorted(a) || !is_sorted(b) {
        return Err(MetricError::NotSorted);
    }
    Ok(mean_squared_gap(a, b).sqrt())
}

fn is_sorted(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

fn mean_squared_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn check_pair(a: &ParticleCloud, b: &ParticleCloud) -> Result<(), MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Unit direction `k`, drawn as a normalized Gaussian vector from
/// `stream.particle(k)`.
pub fn projection_direction(dim: usize, k: usize, stream: SeedStream) -> Vec<f64> {
    let mut rng = stream.particle(k);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn project_sorted(cloud: &ParticleCloud, theta: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = cloud.points().map(|x| x.iter().zip(theta).map(|(a, b)| a * b).sum()).collect();
    p.sort_unstable_by(f64::total_cmp);
    p
}

/// Sliced Wasserstein-2 over `n_projections` random directions, ignoring
/// weights (equalize weighted clouds first with [`equalize`]).
pub fn sliced_wasserstein(a: &ParticleCloud, b: &ParticleCloud, n_projections: usize, stream: SeedStream) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if n_projections == 0 {
        return Err(MetricError::NoProjections);
    }
    let per: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|k| {
            let theta = projection_direction(a.dim(), k, stream);
            mean_squared_gap(&project_sorted(a, &theta), &project_sorted(b, &theta))
        })
        .collect();
    Ok((per.iter().sum::<f64>() / n_projections as f64).sqrt())
}

const ROW_BLOCK: usize = 64;
const COL_TILE: usize = 1024;

/// `sum_i sum_j |a_i - b_j|`, tiled; rows are reduced in index order.
fn cross_sum(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    let d = a.dim();
    let af = a.as_flat();
    let bf = b.as_flat();
    let block_sums: Vec<f64> = af
        .par_chunks(ROW_BLOCK * d)
        .map(|rows| {
            let nr = rows.len() / d;
            let mut acc = vec![0.0; nr];
            for tile in bf.chunks(COL_TILE * d) {
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let x = &rows[r * d..(r + 1) * d];
                    let mut s = 0.0;
                    for y in tile.chunks_exact(d) {
                        let mut q = 0.0;
                        for k in 0..d {
                            let t = x[k] - y[k];
                            q += t * t;
                        }
                        s += q.sqrt();
                    }
                    *acc_r += s;
                }
            }
            acc.iter().sum::<f64>()
        })
        .collect();
    block_sums.iter().sum()
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with plug-in
/// (V-statistic) within-sample means, or with the diagonal excluded when
/// `unbiased` is set. `energy_distance(a, a, _)` is exactly zero.
pub fn energy_distance(a: &ParticleCloud, b: &ParticleCloud, unbiased: bool) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let within = |c: &ParticleCloud, k: f64| {
        let denom = if unbiased && k > 1.0 { k * (k - 1.0) } else { k * k };
        cross_sum(c, c) / denom
    };
    let xy = cross_sum(a, b) / (n * m);
    Ok(2.0 * xy - within(a, n) - within(b, m))
}

/// A uniformly weighted cloud of `n` points: `cloud` itself when it already
/// has `n` uniform points, otherwise a multinomial resample by weight.
pub fn equalize(cloud: &ParticleCloud, n: usize, stream: SeedStream) -> Option<ParticleCloud> {
    if cloud.len() == n && cloud.has_uniform_weights() {
        return Some(cloud.clone());
    }
    let w = cloud.normalized_weights()?;
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in &w {
        acc += v;
        cum.push(acc);
    }
    *cum.last_mut()? = 1.0;
    let idx: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u: f64 = stream.particle(i).random();
            cum.partition_point(|&c| c <= u).min(cum.len() - 1)
        })
        .collect();
    let mut points = Vec::with_capacity(n * cloud.dim());
    for i in idx {
        points.extend_from_slice(cloud.point(i));
    }
    ParticleCloud::new(cloud.dim(), points).ok()
}
