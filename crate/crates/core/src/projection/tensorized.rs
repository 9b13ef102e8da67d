use std::fmt::Write as _;

use rayon::prelude::*;

use super::em::{em_fit, EmFitConfig};
use super::{ProjectionError, ProposalModel};
use crate::cloud::ParticleCloud;
use crate::gaussian::GaussianMixture;
use crate::linalg::{Matrix, Vector};
use crate::rng::SeedStream;

/// Product of independent `B`-dimensional Gaussian mixtures over consecutive
/// coordinate blocks. `B = 2` is the standard family; `B = 1` serves the
/// univariate studies.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorizedGmm<const B: usize> {
    blocks: Vec<GaussianMixture<B>>,
}

impl<const B: usize> TensorizedGmm<B> {
    pub fn new(blocks: Vec<GaussianMixture<B>>) -> Result<Self, ProjectionError> {
        if blocks.is_empty() {
            return Err(ProjectionError::BadConfig("model needs at least one block".into()));
        }
        Ok(Self { blocks })
    }

    /// The same mixture repeated on every block.
    pub fn repeated(block: GaussianMixture<B>, n_blocks: usize) -> Result<Self, ProjectionError> {
        Self::new(vec![block; n_blocks])
    }

    /// Isotropic Gaussian `N(mean, var I)` as a one-component model.
    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self, ProjectionError> {
        if mean.is_empty() || mean.len() % B != 0 {
            return Err(ProjectionError::DimensionNotDivisible { dim: mean.len(), block: B });
        }
        let mut cov = [[0.0; B]; B];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = var;
        }
        let blocks = mean
            .chunks_exact(B)
            .map(|m| GaussianMixture::gaussian(m.try_into().unwrap(), cov))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[GaussianMixture<B>] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        B * self.blocks.len()
    }

    /// Sum of the block log-densities.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        model_log_density(self, x)
    }

    /// Text serialization: a header line, then one line per component with
    /// weight, mean and row-major covariance at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("tensorized-gmm block_dim={B} blocks={}\n", self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            writeln!(out, "block {j} components={}", block.n_components()).unwrap();
            for c in block.components() {
                let mut line = format!("{:.16e}", c.weight);
                for m in c.mean {
                    write!(line, " {m:.16e}").unwrap();
                }
                for row in c.cov {
                    for v in row {
                        write!(line, " {v:.16e}").unwrap();
                    }
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ProjectionError> {
        let bad = |line: usize, msg: &str| ProjectionError::Parse { line: line + 1, message: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines.next().ok_or_else(|| bad(0, "empty input"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let field = |f: &str, key: &str| -> Option<usize> { f.strip_prefix(key)?.parse().ok() };
        if fields.len() != 3 || fields[0] != "tensorized-gmm" {
            return Err(bad(ln, "expected `tensorized-gmm block_dim=.. blocks=..`"));
        }
        if field(fields[1], "block_dim=") != Some(B) {
            return Err(bad(ln, "block dimension mismatch"));
        }
        let n_blocks = field(fields[2], "blocks=").ok_or_else(|| bad(ln, "bad block count"))?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for j in 0..n_blocks {
            let (ln, head) = lines.next().ok_or_else(|| bad(ln, "missing block"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "block" || parts[1].parse::<usize>().ok() != Some(j) {
                return Err(bad(ln, "expected `block <index> components=..`"));
            }
            let k = field(parts[2], "components=").ok_or_else(|| bad(ln, "bad component count"))?;
            let (mut w, mut m, mut c) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..k {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, "missing component"))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(ln, "bad number"))?;
                if vals.len() != 1 + B + B * B {
                    return Err(bad(ln, "wrong number of values"));
                }
                w.push(vals[0]);
                let mean: Vector<B> = vals[1..1 + B].try_into().unwrap();
                let mut cov: Matrix<B> = [[0.0; B]; B];
                for (r, row) in cov.iter_mut().enumerate() {
                    row.copy_from_slice(&vals[1 + B + r * B..1 + B + (r + 1) * B]);
                }
                m.push(mean);
                c.push(cov);
            }
            blocks.push(GaussianMixture::new(&w, &m, &c)?);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(bad(ln, "trailing content"));
        }
        Self::new(blocks)
    }
}

/// Normalized log-density: the sum of block log-densities.
pub fn model_log_density<const B: usize>(model: &TensorizedGmm<B>, x: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), model.dim());
    model
        .blocks
        .iter()
        .zip(x.chunks_exact(B))
        .map(|(b, xb)| b.log_density(xb.try_into().unwrap()))
        .sum()
}

/// `n` draws; particle `i` uses `stream.particle(i)` and samples its blocks in
/// order.
pub fn model_sample<const B: usize>(model: &TensorizedGmm<B>, n: usize, stream: SeedStream) -> ParticleCloud {
    let dim = model.dim();
    if n == 0 {
        return ParticleCloud::empty(dim);
    }
    let mut points = vec![0.0; n * dim];
    points.par_chunks_mut(dim).enumerate().for_each(|(i, out)| {
        let mut rng = stream.particle(i);
        for (b, o) in model.blocks.iter().zip(out.chunks_exact_mut(B)) {
            o.copy_from_slice(&b.sample(&mut rng));
        }
    });
    ParticleCloud::new(dim, points).expect("consistent shape")
}

/// Fits every block independently (and in parallel) on its coordinates of a
/// uniformly weighted cloud. Block `j` uses `stream.child(j)`.
pub fn fit_tensorized<const B: usize>(cloud: &ParticleCloud, cfg: &EmFitConfig, stream: SeedStream) -> Result<TensorizedGmm<B>, ProjectionError> {
    let dim = cloud.dim();
    if dim % B != 0 {
        return Err(ProjectionError::DimensionNotDivisible { dim, block: B });
    }
    if !cloud.has_uniform_weights() {
        return Err(ProjectionError::WeightedCloud);
    }
    let results: Vec<Result<GaussianMixture<B>, ProjectionError>> = (0..dim / B)
        .into_par_iter()
        .map(|j| {
            let samples: Vec<Vector<B>> = cloud.points().map(|p| p[j * B..(j + 1) * B].try_into().unwrap()).collect();
            em_fit(&samples, cfg, stream.child(j as u64)).map(|f| f.model)
        })
        .collect();
    let mut blocks = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(b) => blocks.push(b),
            Err(e) => failures.push((j, e)),
        }
    }
    if !failures.is_empty() {
        return Err(ProjectionError::Blocks(failures));
    }
    TensorizedGmm::new(blocks)
}

impl<const B: usize> ProposalModel for TensorizedGmm<B> {
    fn dim(&self) -> usize {
        TensorizedGmm::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        model_log_density(self, x)
    }

    fn sample(&self, n: usize, stream: SeedStream) -> ParticleCloud {
        model_sample(self, n, stream)
    }

    fn describe(&self) -> String {
        self.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{gm25, gm4};
    use proptest::prelude::*;

    fn two_component() -> GaussianMixture<2> {
        GaussianMixture::new(&[0.4, 0.6], &[[-1.0, 0.0], [2.0, 1.0]], &[[[1.0, 0.3], [0.3, 0.6]], [[0.5, -0.1], [-0.1, 0.8]]]).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = TensorizedGmm::<2>::isotropic(&[0.0, 0.0], 1.0).unwrap();
        assert!((m.log_density(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn density_factorizes_exactly() {
        let m = TensorizedGmm::new(vec![gm4(), two_component(), gm25()]).unwrap();
        let x = [1.0, -2.0, 0.5, 0.7, 10.0, 5.0];
        let parts = gm4().log_density(&[1.0, -2.0]) + two_component().log_density(&[0.5, 0.7]) + gm25().log_density(&[10.0, 5.0]);
        assert_eq!(m.log_density(&x), parts);
    }

    #[test]
    fn duplicated_component_collapses() {
        let one = GaussianMixture::<2>::gaussian([1.0, 2.0], [[2.0, 0.1], [0.1, 1.0]]).unwrap();
        let two = GaussianMixture::new(&[0.5, 0.5], &[[1.0, 2.0]; 2], &[[[2.0, 0.1], [0.1, 1.0]]; 2]).unwrap();
        for x in [[0.0, 0.0], [3.0, -1.0]] {
            assert!((one.log_density(&x) - two.log_density(&x)).abs() < 1e-14);
        }
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let m = two_component();
        let (lo, hi, n) = (-10.0, 10.0, 400);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += m.log_density(&x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn sample_mean_of_single_gaussian() {
        let cov = [[2.0, 0.5], [0.5, 1.0]];
        let m = TensorizedGmm::new(vec![GaussianMixture::gaussian([3.0, -1.0], cov).unwrap()]).unwrap();
        let n = 20_000;
        let c = model_sample(&m, n, SeedStream::new(1));
        let mean: Vec<f64> = (0..2).map(|a| c.points().map(|p| p[a]).sum::<f64>() / n as f64).collect();
        let dist = ((mean[0] - 3.0).powi(2) + (mean[1] + 1.0).powi(2)).sqrt();
        assert!(dist < 3.0 * (3.0 / n as f64).sqrt(), "{mean:?}");
        assert!(model_sample(&m, 0, SeedStream::new(1)).is_empty());
        assert_eq!(model_sample(&m, 10, SeedStream::new(2)), model_sample(&m, 10, SeedStream::new(2)));
    }

    #[test]
    fn fit_d2_is_single_block_fit() {
        let block = two_component();
        let src = TensorizedGmm::new(vec![block]).unwrap();
        let cloud = model_sample(&src, 3000, SeedStream::new(3));
        let cfg = EmFitConfig::with_k0(2);
        let stream = SeedStream::new(4);
        let fitted: TensorizedGmm<2> = fit_tensorized(&cloud, &cfg, stream).unwrap();
        let samples: Vec<[f64; 2]> = cloud.points().map(|p| [p[0], p[1]]).collect();
        let direct = em_fit(&samples, &cfg, stream.child(0)).unwrap().model;
        assert_eq!(fitted.blocks()[0], direct);
    }

    #[test]
    fn fit_rejects_weighted_or_odd_clouds() {
        let c = ParticleCloud::with_log_weights(2, vec![0.0; 8], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(fit_tensorized::<2>(&c, &EmFitConfig::with_k0(1), SeedStream::new(0)).unwrap_err(), ProjectionError::WeightedCloud);
        let c = ParticleCloud::new(3, vec![0.0; 9]).unwrap();
        assert!(matches!(fit_tensorized::<2>(&c, &EmFitConfig::with_k0(1), SeedStream::new(0)), Err(ProjectionError::DimensionNotDivisible { .. })));
    }

    #[test]
    fn sample_log_density_matches_entropy_estimate() {
        // Mean log-density over model samples against an independent
        // 10^6-sample estimate of the negative differential entropy.
        let m = TensorizedGmm::new(vec![two_component(), gm4()]).unwrap();
        let small: Vec<f64> = model_sample(&m, 10_000, SeedStream::new(5)).points().map(|p| m.log_density(p)).collect();
        let big: Vec<f64> = model_sample(&m, 1_000_000, SeedStream::new(6)).points().map(|p| m.log_density(p)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ms = mean(&small);
        let sd = (small.iter().map(|v| (v - ms).powi(2)).sum::<f64>() / (small.len() - 1) as f64).sqrt();
        // Standard error of the difference; the big run contributes 1/100 of the variance.
        let se = sd * (1.0 / small.len() as f64 + 1.0 / big.len() as f64).sqrt();
        assert!((ms - mean(&big)).abs() < 3.0 * se);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(TensorizedGmm::<2>::from_text("").is_err());
        assert!(TensorizedGmm::<2>::from_text("tensorized-gmm block_dim=1 blocks=1\n").is_err());
        let good = TensorizedGmm::new(vec![two_component()]).unwrap().to_text();
        assert!(TensorizedGmm::<2>::from_text(&good.replace("e0 ", "x ")).is_err());
        assert!(TensorizedGmm::<2>::from_text(&format!("{good}extra\n")).is_err());
    }

    fn arb_block() -> impl Strategy<Value = GaussianMixture<2>> {
        (1usize..5)
            .prop_flat_map(|k| {
                (
                    proptest::collection::vec(0.01f64..1.0, k),
                    proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), k),
                    proptest::collection::vec((0.01f64..10.0, 0.01f64..10.0, -0.99f64..0.99), k),
                )
            })
            .prop_map(|(w, m, c)| {
                let total: f64 = w.iter().sum();
                let w: Vec<f64> = w.iter().map(|x| x / total).collect();
                let means: Vec<[f64; 2]> = m.iter().map(|&(a, b)| [a, b]).collect();
                let covs: Vec<[[f64; 2]; 2]> = c
                    .iter()
                    .map(|&(a, b, r)| {
                        let off = r * (a * b).sqrt();
                        [[a, off], [off, b]]
                    })
                    .collect();
                GaussianMixture::new(&w, &means, &covs).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn text_round_trip_is_exact(blocks in proptest::collection::vec(arb_block(), 1..4)) {
            let m = TensorizedGmm::new(blocks).unwrap();
            let back = TensorizedGmm::<2>::from_text(&m.to_text()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn log_density_is_sum_of_blocks(blocks in proptest::collection::vec(arb_block(), 1..4), seed in 0u64..1000) {
            let m = TensorizedGmm::new(blocks).unwrap();
            let x = model_sample(&m, 1, SeedStream::new(seed));
            let p = x.point(0);
            let direct: f64 = m.blocks().iter().enumerate().map(|(j, b)| b.log_density(&[p[2 * j], p[2 * j + 1]])).sum();
            prop_assert_eq!(m.log_density(p), direct);
        }
    }
}
