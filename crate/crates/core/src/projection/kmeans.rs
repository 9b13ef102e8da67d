use rand::Rng;

use crate::linalg::Vector;
use crate::rng::StreamRng;

fn sq_dist<const D: usize>(a: &Vector<D>, b: &Vector<D>) -> f64 {
    (0..D).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// k-means++ (D^2) seeding. When the samples have fewer than `k` distinct
/// points, the surplus centers are uniform draws jittered by
/// `1e-6 * sample-std` per coordinate.
pub fn kmeanspp_init<const D: usize>(samples: &[Vector<D>], k: usize, rng: &mut StreamRng) -> Vec<Vector<D>> {
    assert!(!samples.is_empty() && k >= 1, "k-means++ needs samples and k >= 1");
    let n = samples.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(samples[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    let jitter = jitter_scale(samples);
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            // Guard against landing on a zero-distance tail through rounding.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            }
            samples[pick]
        } else {
            let mut c = samples[rng.random_range(0..n)];
            for (ci, s) in c.iter_mut().zip(jitter) {
                *ci += s * (2.0 * rng.random::<f64>() - 1.0);
            }
            c
        };
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &next));
        }
        centers.push(next);
    }
    centers
}

fn jitter_scale<const D: usize>(samples: &[Vector<D>]) -> Vector<D> {
    let n = samples.len() as f64;
    let mut out = [0.0; D];
    for (i, o) in out.iter_mut().enumerate() {
        let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n;
        // A fully collapsed coordinate still needs distinct centers.
        *o = 1e-6 * if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    out
}
