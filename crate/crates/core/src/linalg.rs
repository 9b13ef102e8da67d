//! Fixed-size dense helpers for the 1x1 and 2x2 blocks used by the mixtures,
//! plus log-space reductions.

pub type Vector<const D: usize> = [f64; D];
pub type Matrix<const D: usize> = [[f64; D]; D];

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Streaming log-sum-exp accumulator; avoids a buffer when the terms are
/// produced one at a time.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }
}

impl LogSumExp {
    #[inline]
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn identity<const D: usize>() -> Matrix<D> {
    let mut m = [[0.0; D]; D];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn add_diagonal<const D: usize>(m: &Matrix<D>, value: f64) -> Matrix<D> {
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        row[i] += value;
    }
    out
}

/// Lower Cholesky factor of a symmetric matrix, or `None` if it is not
/// numerically positive definite.
pub fn cholesky<const D: usize>(a: &Matrix<D>) -> Option<Matrix<D>> {
    let mut l = [[0.0; D]; D];
    for i in 0..D {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
#[inline]
pub fn forward_substitute<const D: usize>(l: &Matrix<D>, b: &Vector<D>) -> Vector<D> {
    let mut y = [0.0; D];
    for i in 0..D {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    y
}

/// Solves `L^T x = y` for lower-triangular `L`.
#[inline]
pub fn backward_substitute_transpose<const D: usize>(l: &Matrix<D>, y: &Vector<D>) -> Vector<D> {
    let mut x = [0.0; D];
    for i in (0..D).rev() {
        let mut s = y[i];
        for k in (i + 1)..D {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

#[inline]
pub fn lower_mul<const D: usize>(l: &Matrix<D>, z: &Vector<D>) -> Vector<D> {
    let mut out = [0.0; D];
    for i in 0..D {
        for k in 0..=i {
            out[i] += l[i][k] * z[k];
        }
    }
    out
}

pub fn log_det_from_cholesky<const D: usize>(l: &Matrix<D>) -> f64 {
    2.0 * (0..D).map(|i| l[i][i].ln()).sum::<f64>()
}

pub fn min_eigenvalue_symmetric<const D: usize>(a: &Matrix<D>) -> f64 {
    match D {
        1 => a[0][0],
        2 => {
            let tr = a[0][0] + a[1][1];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let disc = ((tr * tr) / 4.0 - det).max(0.0).sqrt();
            tr / 2.0 - disc
        }
        _ => unimplemented!("only 1x1 and 2x2 blocks are used"),
    }
}
