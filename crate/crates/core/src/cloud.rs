//! Weighted particle clouds and their on-disk dump format.
//!
//! The dump format is a 16-byte header (`b"EM2CPART"`, `u32` N, `u32` d, all
//! little-endian) followed by N*d `f64` values in row-major order.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::linalg::log_sum_exp;

pub const DUMP_MAGIC: &[u8; 8] = b"EM2CPART";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("expected {expected} log-weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("cloud contains NaN")]
    NaN,
    #[error("bad dump header")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// N points in R^d, stored row-major, with unnormalized log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    points: Vec<f64>,
    log_weights: Vec<f64>,
}

impl ParticleCloud {
    /// Cloud with uniform weights.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self, CloudError> {
        let n = Self::count(dim, points.len())?;
        Ok(Self { dim, points, log_weights: vec![0.0; n] })
    }

    pub fn with_log_weights(dim: usize, points: Vec<f64>, log_weights: Vec<f64>) -> Result<Self, CloudError> {
        let n = Self::count(dim, points.len())?;
        if log_weights.len() != n {
            return Err(CloudError::WeightCount { expected: n, got: log_weights.len() });
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(CloudError::NaN);
        }
        Ok(Self { dim, points, log_weights })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, points: Vec::new(), log_weights: Vec::new() }
    }

    fn count(dim: usize, len: usize) -> Result<usize, CloudError> {
        if dim == 0 || len % dim != 0 {
            return Err(CloudError::Shape { len, dim });
        }
        Ok(len / dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<(), CloudError> {
        if log_weights.len() != self.len() {
            return Err(CloudError::WeightCount { expected: self.len(), got: log_weights.len() });
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(CloudError::NaN);
        }
        self.log_weights = log_weights;
        Ok(())
    }

    /// Coordinates `start..start+width` of every point, as a new cloud.
    pub fn columns(&self, start: usize, width: usize) -> ParticleCloud {
        assert!(start + width <= self.dim);
        let points = self.points().flat_map(|p| p[start..start + width].iter().copied()).collect();
        ParticleCloud { dim: width, points, log_weights: self.log_weights.clone() }
    }

    /// Self-normalized weights; `None` when every log-weight is `-inf`.
    pub fn normalized_weights(&self) -> Option<Vec<f64>> {
        normalize_log_weights(&self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.log_weights)
    }

    pub fn has_uniform_weights(&self) -> bool {
        self.log_weights.windows(2).all(|w| w[0] == w[1])
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), CloudError> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.points {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump; weights come back uniform.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self, CloudError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != DUMP_MAGIC {
            return Err(CloudError::BadMagic);
        }
        let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; n * d * 8];
        r.read_exact(&mut buf)?;
        let points = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(d, points)
    }
}

/// Normalizes log-weights with log-sum-exp. Returns `None` if all are `-inf`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return None;
    }
    Some(log_weights.iter().map(|&l| (l - lse).exp()).collect())
}

/// `(sum w)^2 / sum w^2`, computed from log-weights; 0 for a degenerate set.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    match normalize_log_weights(log_weights) {
        Some(w) => {
            let s2: f64 = w.iter().map(|x| x * x).sum();
            1.0 / s2
        }
        None => 0.0,
    }
}
