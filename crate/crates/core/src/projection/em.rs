use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeanspp_init;
use super::ProjectionError;
use crate::gaussian::GaussianMixture;
use crate::linalg::{Matrix, Vector};
use crate::rng::SeedStream;

/// EM hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmFitConfig {
    pub k0: usize,
    pub n_init: usize,
    pub max_iters: usize,
    pub cov_reg: f64,
    /// Stop when the relative log-likelihood improvement drops below this.
    pub tol: f64,
}

impl Default for EmFitConfig {
    fn default() -> Self {
        Self { k0: 1, n_init: 3, max_iters: 500, cov_reg: 1e-3, tol: 1e-6 }
    }
}

impl EmFitConfig {
    pub fn with_k0(k0: usize) -> Self {
        Self { k0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |m: &str| Err(ProjectionError::BadConfig(m.to_string()));
        if self.k0 == 0 {
            return bad("k0 must be >= 1");
        }
        if self.n_init == 0 {
            return bad("n_init must be >= 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        if !(self.cov_reg > 0.0) || !self.cov_reg.is_finite() {
            return bad("cov_reg must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }
}

/// Result of one EM fit: the best restart's model and its log-likelihood
/// trajectory (one entry per evaluated model, the last entry belonging to the
/// returned model).
#[derive(Clone, Debug)]
pub struct EmFit<const D: usize> {
    pub model: GaussianMixture<D>,
    pub log_likelihood: Vec<f64>,
    pub restart: usize,
}

impl<const D: usize> EmFit<D> {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().expect("at least one evaluation")
    }
}

/// Fits a `cfg.k0`-component full-covariance mixture by EM, keeping the best
/// of `cfg.n_init` k-means++ restarts. Restart `r` draws from
/// `stream.child(r)`.
pub fn em_fit<const D: usize>(samples: &[Vector<D>], cfg: &EmFitConfig, stream: SeedStream) -> Result<EmFit<D>, ProjectionError> {
    cfg.validate()?;
    if samples.len() < 2 * cfg.k0 {
        return Err(ProjectionError::TooFewSamples { need: 2 * cfg.k0, got: samples.len() });
    }
    if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(ProjectionError::NonFinite);
    }
    let fits: Vec<Option<EmFit<D>>> = (0..cfg.n_init)
        .into_par_iter()
        .map(|r| single_restart(samples, cfg, stream.child(r as u64)).map(|(model, log_likelihood)| EmFit { model, log_likelihood, restart: r }))
        .collect();
    // Ties keep the earliest restart so the choice is order independent.
    fits.into_iter()
        .flatten()
        .fold(None, |best: Option<EmFit<D>>, fit| match best {
            Some(b) if b.final_log_likelihood() >= fit.final_log_likelihood() => Some(b),
            _ => Some(fit),
        })
        .ok_or(ProjectionError::AllRestartsFailed)
}

/// Two-dimensional [`em_fit`].
pub fn em_fit_2d(samples: &[Vector<2>], cfg: &EmFitConfig, stream: SeedStream) -> Result<EmFit<2>, ProjectionError> {
    em_fit(samples, cfg, stream)
}

fn single_restart<const D: usize>(samples: &[Vector<D>], cfg: &EmFitConfig, stream: SeedStream) -> Option<(GaussianMixture<D>, Vec<f64>)> {
    let k = cfg.k0;
    let n = samples.len();
    let mut rng = stream.rng();
    let centers = kmeanspp_init(samples, k, &mut rng);

    // Hard assignment to the nearest center seeds the first M-step.
    let mut resp = vec![0.0; n * k];
    let mut nearest_dist = vec![0.0; n];
    for (i, s) in samples.iter().enumerate() {
        let (best, d) = centers
            .iter()
            .enumerate()
            .map(|(j, c)| (j, (0..D).map(|a| (s[a] - c[a]).powi(2)).sum::<f64>()))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        resp[i * k + best] = 1.0;
        nearest_dist[i] = -d;
    }
    let mut model = m_step(samples, &resp, k, cfg.cov_reg, &nearest_dist)?;

    let mut history = Vec::new();
    let mut log_dens = vec![0.0; n];
    for it in 0..=cfg.max_iters {
        let ll = e_step(samples, &model, &mut resp, &mut log_dens);
        if !ll.is_finite() {
            return None;
        }
        history.push(ll);
        if it == cfg.max_iters {
            break;
        }
        if let [.., prev, last] = history[..] {
            if last - prev < cfg.tol * prev.abs() {
                break;
            }
        }
        model = m_step(samples, &resp, k, cfg.cov_reg, &log_dens)?;
    }
    Some((model, history))
}

/// Fills `resp` with responsibilities and `log_dens` with per-sample mixture
/// log-densities; returns the total log-likelihood.
fn e_step<const D: usize>(samples: &[Vector<D>], model: &GaussianMixture<D>, resp: &mut [f64], log_dens: &mut [f64]) -> f64 {
    let k = model.n_components();
    resp.par_chunks_mut(k)
        .zip(log_dens.par_iter_mut())
        .zip(samples.par_iter())
        .for_each(|((r, ld), s)| {
            model.component_log_densities(s, r);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in r.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in r.iter_mut() {
                *v /= total;
            }
            *ld = max + total.ln();
        });
    log_dens.iter().sum()
}

/// Closed-form weight, mean and covariance updates with `cov_reg * I` added.
/// Components whose total responsibility is below `1e-8 * N` are re-seeded at
/// the samples with the lowest `score` (model log-density).
fn m_step<const D: usize>(samples: &[Vector<D>], resp: &[f64], k: usize, cov_reg: f64, score: &[f64]) -> Option<GaussianMixture<D>> {
    let n = samples.len();
    let stats: Vec<(f64, Vector<D>, Matrix<D>)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut nk = 0.0;
            let mut mean = [0.0; D];
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + j];
                nk += r;
                for a in 0..D {
                    mean[a] += r * s[a];
                }
            }
            let mut cov = [[0.0; D]; D];
            if nk > 0.0 {
                for m in &mut mean {
                    *m /= nk;
                }
                for (i, s) in samples.iter().enumerate() {
                    let r = resp[i * k + j];
                    if r == 0.0 {
                        continue;
                    }
                    for a in 0..D {
                        let da = s[a] - mean[a];
                        for b in 0..=a {
                            cov[a][b] += r * da * (s[b] - mean[b]);
                        }
                    }
                }
                for a in 0..D {
                    for b in 0..=a {
                        cov[a][b] /= nk;
                        cov[b][a] = cov[a][b];
                    }
                }
            }
            for (a, row) in cov.iter_mut().enumerate() {
                row[a] += cov_reg;
            }
            (nk, mean, cov)
        })
        .collect();

    let empty: Vec<usize> = (0..k).filter(|&j| stats[j].0 < 1e-8 * n as f64).collect();
    let mut weights: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let mut means: Vec<Vector<D>> = stats.iter().map(|s| s.1).collect();
    let mut covs: Vec<Matrix<D>> = stats.iter().map(|s| s.2).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let fallback = pooled_covariance(samples, cov_reg);
        for (slot, &j) in empty.iter().enumerate() {
            means[j] = samples[order[slot % n]];
            covs[j] = fallback;
            weights[j] = 1.0;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GaussianMixture::new_regularized(&weights, &means, &covs).ok()
}

fn pooled_covariance<const D: usize>(samples: &[Vector<D>], cov_reg: f64) -> Matrix<D> {
    let n = samples.len() as f64;
    let mut mean = [0.0; D];
    for s in samples {
        for a in 0..D {
            mean[a] += s[a] / n;
        }
    }
    let mut cov = [[0.0; D]; D];
    for s in samples {
        for a in 0..D {
            for b in 0..D {
                cov[a][b] += (s[a] - mean[a]) * (s[b] - mean[b]) / n;
            }
        }
    }
    for (a, row) in cov.iter_mut().enumerate() {
        row[a] += cov_reg;
    }
    cov
}

/// Plain mixture log-likelihood of `samples`.
pub fn log_likelihood<const D: usize>(model: &GaussianMixture<D>, samples: &[Vector<D>]) -> f64 {
    let per: Vec<f64> = samples.par_iter().map(|s| model.log_density(s)).collect();
    per.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianMixture2D;
    use crate::linalg::min_eigenvalue_symmetric;
    use proptest::prelude::*;
    use rand::Rng;

    fn draw(model: &GaussianMixture2D, n: usize, seed: u64) -> Vec<[f64; 2]> {
        let s = SeedStream::new(seed);
        (0..n).map(|i| model.sample(&mut s.particle(i))).collect()
    }

    #[test]
    fn single_component_is_regularized_sample_moments() {
        let samples = draw(&crate::targets::gm4(), 500, 1);
        let fit = em_fit(&samples, &EmFitConfig::with_k0(1), SeedStream::new(2)).unwrap();
        let n = samples.len() as f64;
        let mx = samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let my = samples.iter().map(|s| s[1]).sum::<f64>() / n;
        let cxy = samples.iter().map(|s| (s[0] - mx) * (s[1] - my)).sum::<f64>() / n;
        let cxx = samples.iter().map(|s| (s[0] - mx).powi(2)).sum::<f64>() / n + 1e-3;
        let c = &fit.model.components()[0];
        assert!((c.mean[0] - mx).abs() < 1e-10 && (c.mean[1] - my).abs() < 1e-10);
        assert!((c.cov[0][1] - cxy).abs() < 1e-9 && (c.cov[0][0] - cxx).abs() < 1e-9);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn recovers_two_separated_gaussians() {
        let truth = GaussianMixture::new(&[0.5, 0.5], &[[0.0, 0.0], [10.0, 10.0]], &[[[1.0, 0.0], [0.0, 1.0]]; 2]).unwrap();
        let samples = draw(&truth, 10_000, 3);
        let fit = em_fit_2d(&samples, &EmFitConfig::with_k0(2), SeedStream::new(4)).unwrap();
        let mut comps: Vec<_> = fit.model.components().to_vec();
        comps.sort_by(|a, b| a.mean[0].total_cmp(&b.mean[0]));
        for (c, m) in comps.iter().zip([0.0, 10.0]) {
            assert!((c.mean[0] - m).abs() < 0.1 && (c.mean[1] - m).abs() < 0.1);
            assert!((c.weight - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn too_few_samples() {
        let err = em_fit(&[[0.0, 0.0]; 3], &EmFitConfig::with_k0(2), SeedStream::new(0)).unwrap_err();
        assert_eq!(err, ProjectionError::TooFewSamples { need: 4, got: 3 });
    }

    #[test]
    fn degenerate_samples_keep_all_components() {
        let mut samples = vec![[1.0, 1.0]; 40];
        samples.push([2.0, 2.0]);
        let fit = em_fit(&samples, &EmFitConfig::with_k0(4), SeedStream::new(5)).unwrap();
        assert_eq!(fit.model.n_components(), 4);
        for c in fit.model.components() {
            assert!(min_eigenvalue_symmetric(&c.cov) >= 1e-3 * (1.0 - 1e-9));
        }
    }

    #[test]
    fn refit_recovers_fitted_model() {
        let model = GaussianMixture::new(
            &[0.3, 0.7],
            &[[-5.0, 0.0], [5.0, 2.0]],
            &[[[1.0, 0.3], [0.3, 0.5]], [[0.8, -0.2], [-0.2, 1.2]]],
        )
        .unwrap();
        let samples = draw(&model, 10_000, 6);
        let fit = em_fit(&samples, &EmFitConfig::with_k0(2), SeedStream::new(7)).unwrap();
        let mut comps: Vec<_> = fit.model.components().to_vec();
        comps.sort_by(|a, b| a.mean[0].total_cmp(&b.mean[0]));
        for (c, t) in comps.iter().zip(model.components()) {
            assert!((c.mean[0] - t.mean[0]).abs() < 0.1 && (c.mean[1] - t.mean[1]).abs() < 0.1);
            assert!((c.weight - t.weight).abs() < 0.05);
        }
    }

    #[test]
    fn gm25_fit_is_monotone() {
        let samples = draw(&crate::targets::gm25(), 2000, 8);
        let fit = em_fit(&samples, &EmFitConfig::with_k0(25), SeedStream::new(9)).unwrap();
        assert_monotone(&fit.log_likelihood);
    }

    fn assert_monotone(ll: &[f64]) {
        for w in ll.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "log-likelihood dropped: {} -> {}", w[0], w[1]);
        }
    }

    fn clustered_samples(seed: u64, n: usize) -> Vec<[f64; 2]> {
        let mut rng = SeedStream::new(seed).rng();
        let centers: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect();
        (0..n)
            .map(|i| {
                let c = centers[i % 3];
                [c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-2.0..2.0)]
            })
            .collect()
    }

    /// Loss in the EM surrogate from adding `c I` to the exact covariance
    /// maximizer, summed over components: for a 2x2 scatter `S` it is
    /// `n_k / 2 (ln det(S + cI) / det S - c tr(S + cI) / det(S + cI))`.
    fn ridge_gap(samples: &[[f64; 2]], resp: &[f64], k: usize, c: f64) -> f64 {
        let mut gap = 0.0;
        for j in 0..k {
            let nk: f64 = (0..samples.len()).map(|i| resp[i * k + j]).sum();
            if nk <= 0.0 {
                continue;
            }
            let m = [0, 1].map(|a| samples.iter().enumerate().map(|(i, s)| resp[i * k + j] * s[a]).sum::<f64>() / nk);
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + j];
                sxx += r * (s[0] - m[0]).powi(2) / nk;
                sxy += r * (s[0] - m[0]) * (s[1] - m[1]) / nk;
                syy += r * (s[1] - m[1]).powi(2) / nk;
            }
            let det = sxx * syy - sxy * sxy;
            let det_reg = (sxx + c) * (syy + c) - sxy * sxy;
            gap += if det > 0.0 { 0.5 * nk * ((det_reg / det).ln() - c * (sxx + syy + 2.0 * c) / det_reg) } else { f64::INFINITY };
        }
        gap
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]
        // The ridge makes each M-step a perturbed maximizer, so the ascent
        // inequality holds up to the surrogate loss that the ridge costs.
        #[test]
        fn em_log_likelihood_ascends_up_to_ridge_gap(seed in 0u64..10_000, k in 1usize..6, n in 50usize..400) {
            let samples = clustered_samples(seed, n);
            let cfg = EmFitConfig { k0: k, n_init: 1, ..EmFitConfig::default() };
            let fit = em_fit(&samples, &cfg, SeedStream::new(seed + 1)).unwrap();
            prop_assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);

            // Replay the restart step by step.
            let mut rng = SeedStream::new(seed + 1).child(0).rng();
            let centers = kmeanspp_init(&samples, k, &mut rng);
            let mut resp = vec![0.0; n * k];
            let mut score = vec![0.0; n];
            for (i, s) in samples.iter().enumerate() {
                let d: Vec<f64> = centers.iter().map(|c| (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2)).collect();
                let best = (0..k).fold(0, |b, j| if d[j] < d[b] { j } else { b });
                resp[i * k + best] = 1.0;
                score[i] = -d[best];
            }
            let mut model = m_step(&samples, &resp, k, cfg.cov_reg, &score).unwrap();
            let mut ll = e_step(&samples, &model, &mut resp, &mut score);
            prop_assert_eq!(ll, fit.log_likelihood[0]);
            for &recorded in &fit.log_likelihood[1..] {
                let reseeds = (0..k).any(|j| (0..n).map(|i| resp[i * k + j]).sum::<f64>() < 1e-8 * n as f64);
                let gap = ridge_gap(&samples, &resp, k, cfg.cov_reg);
                model = m_step(&samples, &resp, k, cfg.cov_reg, &score).unwrap();
                let next = e_step(&samples, &model, &mut resp, &mut score);
                prop_assert_eq!(next, recorded);
                if !reseeds {
                    prop_assert!(next >= ll - gap - 1e-8 * ll.abs(), "{} -> {} with gap {}", ll, next, gap);
                }
                ll = next;
            }
        }
    }

    #[test]
    fn ridge_gap_vanishes_without_regularization() {
        let samples = clustered_samples(3, 90);
        let k = 2;
        let resp: Vec<f64> = (0..90 * k).map(|i| if (i / k) % 2 == i % k { 1.0 } else { 0.0 }).collect();
        assert_eq!(ridge_gap(&samples, &resp, k, 0.0), 0.0);
        assert!(ridge_gap(&samples, &resp, k, 1e-3) > 0.0);
    }
}
