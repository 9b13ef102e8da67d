//! Exact (quadrature) iterates of the mirror maps on a one-dimensional grid.
//!
//! Measures are probability vectors over the grid points, stored as log
//! masses. The entropic mirror map is `mu -> mu^{1-eps} pi^eps / Z`; the
//! Markov-augmented map mixes it with `(pi/mu)^eps (mu K) / Z'`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::linalg::log_sum_exp;
use crate::targets::{Target, TargetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("measures are not mutually absolutely continuous at cell {0}")]
    AbsoluteContinuity(usize),
    #[error("grid sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("measure has no mass")]
    Empty,
    #[error("invalid grid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// `m` equally spaced points from `lo` to `hi` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self, GridError> {
        if m < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(GridError::BadParameter(format!("need m >= 2 and lo < hi, got m={m}, [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, m })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.point(i)).collect()
    }
}

/// A normalized probability vector on a grid, in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    log_mass: Vec<f64>,
}

fn normalize_in_place(v: &mut [f64]) -> Result<(), GridError> {
    let lse = log_sum_exp(v);
    if !lse.is_finite() {
        return Err(GridError::Empty);
    }
    for x in v.iter_mut() {
        *x -= lse;
    }
    Ok(())
}

impl GridMeasure {
    /// Normalizes arbitrary log masses.
    pub fn from_log_mass(grid: Grid, mut log_mass: Vec<f64>) -> Result<Self, GridError> {
        if log_mass.len() != grid.m {
            return Err(GridError::SizeMismatch(log_mass.len(), grid.m));
        }
        if log_mass.iter().any(|v| v.is_nan()) {
            return Err(GridError::BadParameter("NaN log mass".into()));
        }
        normalize_in_place(&mut log_mass)?;
        Ok(Self { grid, log_mass })
    }

    /// Discretizes an unnormalized log-density by point evaluation.
    pub fn from_log_density(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        Self::from_log_mass(grid, grid.points().into_iter().map(f).collect())
    }

    pub fn from_target(grid: Grid, target: &dyn Target) -> Result<Self, GridError> {
        if target.dim() != 1 {
            return Err(GridError::Target(TargetError::DimensionMismatch { expected: 1, got: target.dim() }));
        }
        Self::from_log_density(grid, |x| target.log_density(&[x]))
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn log_mass(&self) -> &[f64] {
        &self.log_mass
    }

    pub fn mass(&self) -> Vec<f64> {
        self.log_mass.iter().map(|v| v.exp()).collect()
    }

    /// `mu K` in log space: the vector-matrix product runs in the linear
    /// domain after rescaling by the largest mass.
    pub fn push_forward(&self, k: &GridKernel) -> Result<GridMeasure, GridError> {
        if k.m != self.grid.m {
            return Err(GridError::SizeMismatch(k.m, self.grid.m));
        }
        let max = self.log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v: Vec<f64> = self.log_mass.iter().map(|l| (l - max).exp()).collect();
        let m = k.m;
        let cols: Vec<f64> = (0..m)
            .into_par_iter()
            .with_min_len(64)
            .map(|j| (0..m).map(|i| v[i] * k.data[i * m + j]).sum::<f64>())
            .collect();
        let log_mass = cols.iter().map(|c| c.ln() + max).collect();
        GridMeasure::from_log_mass(self.grid, log_mass)
    }

    fn check_pair(&self, other: &GridMeasure) -> Result<(), GridError> {
        if self.grid.m != other.grid.m {
            return Err(GridError::SizeMismatch(self.grid.m, other.grid.m));
        }
        Ok(())
    }
}

/// Row-stochastic transition matrix on a grid, stored densely row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridKernel {
    m: usize,
    data: Vec<f64>,
}

impl GridKernel {
    pub fn identity(m: usize) -> Self {
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            data[i * m + i] = 1.0;
        }
        Self { m, data }
    }

    pub fn from_rows(m: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != m * m {
            return Err(GridError::SizeMismatch(data.len(), m * m));
        }
        let k = Self { m, data };
        if let Some(i) = (0..m).find(|&i| k.row(i).iter().any(|v| *v < 0.0 || !v.is_finite()) || (k.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-10) {
            return Err(GridError::BadParameter(format!("row {i} is not a probability vector")));
        }
        Ok(k)
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.m).map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Metropolis matrix for a Gaussian random-walk proposal on the grid:
/// `q_ij = h phi_sigma(x_j - x_i)` (scaled down uniformly if any row would
/// exceed one), accepted with `min(1, pi_j / pi_i)`; rejected mass stays on
/// the diagonal. Detailed balance with respect to `pi` holds entrywise.
pub fn discretize_rw_kernel(pi: &GridMeasure, sigma: f64) -> Result<GridKernel, GridError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GridError::BadParameter(format!("sigma must be positive, got {sigma}")));
    }
    let grid = pi.grid;
    let m = grid.m;
    let h = grid.spacing();
    let phi = |d: f64| (-0.5 * (d / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    // The proposal only depends on |i - j|.
    let q: Vec<f64> = (0..m).map(|k| h * phi(k as f64 * h)).collect();
    let widest = (0..m)
        .map(|i| (0..m).filter(|&j| j != i).map(|j| q[i.abs_diff(j)]).sum::<f64>())
        .fold(0.0, f64::max);
    let scale = if widest > 1.0 { 1.0 / widest } else { 1.0 };
    let lp = &pi.log_mass;
    let mut data = vec![0.0; m * m];
    data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let mut off = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            let accept = (lp[j] - lp[i]).min(0.0).exp();
            *r = scale * q[i.abs_diff(j)] * accept;
            off += *r;
        }
        row[i] = (1.0 - off).max(0.0);
    });
    Ok(GridKernel { m, data })
}

/// Unadjusted Langevin transition `N(x + gamma grad log pi(x), 2 gamma)`
/// integrated over grid cells (cell edges at midpoints), with the tails
/// folded into the two boundary cells.
pub fn discretize_ula_kernel(grid: Grid, target: &dyn Target, gamma: f64) -> Result<GridKernel, GridError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(GridError::BadParameter(format!("gamma must be positive, got {gamma}")));
    }
    if target.dim() != 1 || !target.has_gradient() {
        return Err(GridError::Target(TargetError::NoGradient(target.name().to_string())));
    }
    let m = grid.m;
    let h = grid.spacing();
    let edges: Vec<f64> = (0..m - 1).map(|j| grid.point(j) + 0.5 * h).collect();
    let sd = (2.0 * gamma).sqrt();
    let mut data = vec![0.0; m * m];
    let errors: Vec<Option<TargetError>> = data
        .par_chunks_mut(m)
        .enumerate()
        .map(|(i, row)| {
            let x = grid.point(i);
            let mut g = [0.0];
            if let Err(e) = target.grad_log_density(&[x], &mut g) {
                return Some(e);
            }
            let normal = Normal::new(x + gamma * g[0], sd).expect("positive sd");
            let mut prev = 0.0;
            for (j, e) in edges.iter().enumerate() {
                let c = normal.cdf(*e);
                row[j] = (c - prev).max(0.0);
                prev = c;
            }
            row[m - 1] = (1.0 - prev).max(0.0);
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
            None
        })
        .collect();
    if let Some(e) = errors.into_iter().flatten().next() {
        return Err(e.into());
    }
    Ok(GridKernel { m, data })
}

/// Stationary vector of `k` by power iteration from `start`, stopping when
/// an iteration moves less than `tol` in total variation.
pub fn stationary_vector(k: &GridKernel, start: &GridMeasure, tol: f64, max_iters: usize) -> Result<(GridMeasure, usize), GridError> {
    let mut cur = start.clone();
    for it in 1..=max_iters {
        let next = cur.push_forward(k)?;
        let change = tv_grid(&cur, &next)?;
        cur = next;
        if change < tol {
            return Ok((cur, it));
        }
    }
    Ok((cur, max_iters))
}

fn check_continuity(mu: &GridMeasure, pi: &GridMeasure) -> Result<(), GridError> {
    mu.check_pair(pi)?;
    if let Some(i) = mu
        .log_mass
        .iter()
        .zip(&pi.log_mass)
        .position(|(a, b)| (*a == f64::NEG_INFINITY) != (*b == f64::NEG_INFINITY))
    {
        return Err(GridError::AbsoluteContinuity(i));
    }
    Ok(())
}

/// `eps * (log pi - log mu)` cellwise, with `-inf` where both vanish.
fn tempered_log_ratio(mu: &GridMeasure, pi: &GridMeasure, epsilon: f64) -> Vec<f64> {
    mu.log_mass
        .iter()
        .zip(&pi.log_mass)
        .map(|(m, p)| if *m == f64::NEG_INFINITY { f64::NEG_INFINITY } else { epsilon * (p - m) })
        .collect()
}

/// `F_e(mu)`: cellwise `(1 - eps) log mu + eps log pi`, renormalized.
pub fn exact_emd_update(mu: &GridMeasure, pi: &GridMeasure, epsilon: f64) -> Result<GridMeasure, GridError> {
    check_continuity(mu, pi)?;
    let log_mass = mu
        .log_mass
        .iter()
        .zip(&pi.log_mass)
        .map(|(m, p)| if *m == f64::NEG_INFINITY { f64::NEG_INFINITY } else { (1.0 - epsilon) * m + epsilon * p })
        .collect();
    GridMeasure::from_log_mass(mu.grid, log_mass)
}

/// `(pi/mu)^eps (mu K)`, renormalized: the kernel branch.
pub fn exact_kernel_branch(mu: &GridMeasure, pi: &GridMeasure, k: &GridKernel, epsilon: f64) -> Result<GridMeasure, GridError> {
    check_continuity(mu, pi)?;
    let mk = mu.push_forward(k)?;
    let log_mass = tempered_log_ratio(mu, pi, epsilon).iter().zip(&mk.log_mass).map(|(r, l)| r + l).collect();
    GridMeasure::from_log_mass(mu.grid, log_mass)
}

/// `lambda F_e(mu) + (1 - lambda) F_K(mu)`, each branch normalized first.
pub fn exact_em2c_update(mu: &GridMeasure, pi: &GridMeasure, k: &GridKernel, epsilon: f64, lambda: f64) -> Result<GridMeasure, GridError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(GridError::BadParameter(format!("lambda must be in (0, 1], got {lambda}")));
    }
    let mirror = exact_emd_update(mu, pi, epsilon)?;
    if lambda == 1.0 {
        return Ok(mirror);
    }
    let kernel = exact_kernel_branch(mu, pi, k, epsilon)?;
    let (la, lb) = (lambda.ln(), (1.0 - lambda).ln());
    let log_mass = mirror.log_mass.iter().zip(&kernel.log_mass).map(|(a, b)| log_sum_exp(&[la + a, lb + b])).collect();
    GridMeasure::from_log_mass(mu.grid, log_mass)
}

/// `(A, B) = (log int f^eps dmu, log int f^eps d(mu K))` with `f = pi / mu`.
pub fn mirror_log_integrals(mu: &GridMeasure, pi: &GridMeasure, k: &GridKernel, epsilon: f64) -> Result<(f64, f64), GridError> {
    check_continuity(mu, pi)?;
    let r = tempered_log_ratio(mu, pi, epsilon);
    let mk = mu.push_forward(k)?;
    let a: Vec<f64> = r.iter().zip(&mu.log_mass).map(|(x, l)| x + l).collect();
    let b: Vec<f64> = r.iter().zip(&mk.log_mass).map(|(x, l)| x + l).collect();
    Ok((log_sum_exp(&a), log_sum_exp(&b)))
}

/// The mixing weight `B / (B - A)` when `B > 0`, else `beta`. It solves
/// `lambda A + (1 - lambda) B = 0`.
pub fn adaptive_lambda(mu: &GridMeasure, pi: &GridMeasure, k: &GridKernel, epsilon: f64, beta: f64) -> Result<f64, GridError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(GridError::BadParameter(format!("beta must be in (0, 1], got {beta}")));
    }
    let (a, b) = mirror_log_integrals(mu, pi, k, epsilon)?;
    // A <= 0 by Jensen; near mu = pi rounding can push it a few ulps above.
    let a = a.min(0.0);
    if b > 0.0 {
        assert!(b - a > 0.0, "B > 0 forces A < B since A <= 0");
        Ok(b / (b - a))
    } else {
        Ok(beta)
    }
}

/// `KL(p || q)`; `+inf` when `p` charges a cell that `q` does not.
pub fn kl_grid(p: &GridMeasure, q: &GridMeasure) -> Result<f64, GridError> {
    p.check_pair(q)?;
    let mut total = 0.0;
    for (lp, lq) in p.log_mass.iter().zip(&q.log_mass) {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        if *lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total += lp.exp() * (lp - lq);
    }
    Ok(total)
}

pub fn tv_grid(p: &GridMeasure, q: &GridMeasure) -> Result<f64, GridError> {
    p.check_pair(q)?;
    Ok(0.5 * p.log_mass.iter().zip(&q.log_mass).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>())
}

/// How lambda is chosen in the exact iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLambda {
    Adaptive { beta: f64 },
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKernelSpec {
    Identity,
    Rw { sigma: f64 },
    Ula { gamma: f64 },
}

/// One row of the exact-iteration trace. `lambda` is the weight used to go
/// from iterate `t` to `t + 1` (absent on the last row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTraceRow {
    pub t: usize,
    pub kl: f64,
    pub tv: f64,
    pub lambda: Option<f64>,
}

/// Runs `n_iterations` exact updates from `mu0`, recording `KL(pi || mu_t)`,
/// `TV(pi, mu_t)` and the lambda used at each step.
pub fn run_exact(
    pi: &GridMeasure,
    mu0: &GridMeasure,
    k: &GridKernel,
    epsilon: f64,
    lambda: GridLambda,
    n_iterations: usize,
) -> Result<Vec<GridTraceRow>, GridError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(GridError::BadParameter(format!("epsilon must be in (0, 1], got {epsilon}")));
    }
    let mut rows = Vec::with_capacity(n_iterations + 1);
    let mut mu = mu0.clone();
    for t in 0..=n_iterations {
        let kl = kl_grid(pi, &mu)?;
        let tv = tv_grid(pi, &mu)?;
        if t == n_iterations {
            rows.push(GridTraceRow { t, kl, tv, lambda: None });
            break;
        }
        let l = match lambda {
            GridLambda::Adaptive { beta } => adaptive_lambda(&mu, pi, k, epsilon, beta)?,
            GridLambda::Constant(l) => l,
        };
        rows.push(GridTraceRow { t, kl, tv, lambda: Some(l) });
        mu = exact_em2c_update(&mu, pi, k, epsilon, l)?;
    }
    Ok(rows)
}
