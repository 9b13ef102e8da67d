//! Experiment specs, built-in presets and the multi-repeat runner.
//!
//! A spec file is TOML. It may name a `preset`; every key in the file then
//! overrides the preset value. Nested values (`target`, `kernel`, ...) are
//! replaced whole.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{run_ais, run_rw_population, AisConfig};
use crate::cloud::ParticleCloud;
use crate::gaussian::GaussianMixture;
use crate::kernels::KernelSpec;
use crate::linalg::{Matrix, Vector};
use crate::metrics::{energy_distance, equalize, sliced_wasserstein, MetricConfig};
use crate::mirror::{run_em2c, Em2cConfig, Em2cTrace, LambdaSchedule, Resampling};
use crate::projection::{EmFitConfig, ProposalModel, TensorizedGmm};
use crate::rng::{purpose, SeedStream};
use crate::targets::{Target, TargetId, TargetSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("reference sampling failed: {0}")]
    Reference(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Em2c,
    Rw,
    Ais,
}

/// Scalar means are broadcast to every coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Initial proposal: `N(mean, var I)`, or, with `modes`, the equal-weight
/// mixture over `m` in `modes` of `N(mean + m 1, var I)` in every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: MeanSpec,
    pub var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<f64>>,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self { mean: MeanSpec::Scalar(30.0), var: 1.0, modes: None }
    }
}

impl InitialSpec {
    pub fn build<const B: usize>(&self, dim: usize) -> Result<TensorizedGmm<B>, ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        if !(self.var > 0.0) {
            return Err(bad(format!("initial.var must be positive, got {}", self.var)));
        }
        if dim % B != 0 {
            return Err(bad(format!("dimension {dim} is not a multiple of the block size {B}")));
        }
        let mean = match &self.mean {
            MeanSpec::Scalar(m) => vec![*m; dim],
            MeanSpec::Vector(v) if v.len() == dim => v.clone(),
            MeanSpec::Vector(v) => return Err(bad(format!("initial.mean has {} entries for dimension {dim}", v.len()))),
        };
        let modes = self.modes.clone().unwrap_or_else(|| vec![0.0]);
        if modes.is_empty() {
            return Err(bad("initial.modes is empty".into()));
        }
        let mut cov: Matrix<B> = [[0.0; B]; B];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = self.var;
        }
        let blocks = mean
            .chunks(B)
            .map(|m| {
                let means: Vec<Vector<B>> = modes.iter().map(|o| std::array::from_fn(|i| m[i] + o)).collect();
                let w = vec![1.0 / modes.len() as f64; modes.len()];
                GaussianMixture::new(&w, &means, &vec![cov; modes.len()]).map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        TensorizedGmm::new(blocks).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Em2cSettings {
    pub epsilon: f64,
    pub lambda: LambdaSchedule,
    pub n_particles: usize,
    pub n_iterations: usize,
    pub kernel: KernelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_move: Option<KernelSpec>,
    pub projection: EmFitConfig,
    #[serde(default)]
    pub resampling: Resampling,
}

impl Default for Em2cSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.8,
            lambda: LambdaSchedule::Constant(0.8),
            n_particles: 2000,
            n_iterations: 25,
            kernel: KernelSpec::rw(1.0, 10),
            local_move: None,
            projection: EmFitConfig::default(),
            resampling: Resampling::Multinomial,
        }
    }
}

impl Em2cSettings {
    pub fn config(&self, seed: u64, record_timing: bool) -> Em2cConfig {
        Em2cConfig {
            epsilon: self.epsilon,
            lambda: self.lambda.clone(),
            n_particles: self.n_particles,
            n_iterations: self.n_iterations,
            kernel: self.kernel,
            local_move: self.local_move,
            projection: self.projection.clone(),
            resampling: self.resampling,
            seed,
            record_timing,
            keep_particles: false,
        }
    }
}

/// A population of independent random-walk chains; the final states are
/// evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RwSettings {
    pub sigma: f64,
    pub n_iter: usize,
    pub n_chains: usize,
}

impl Default for RwSettings {
    fn default() -> Self {
        Self { sigma: 1.0, n_iter: 1000, n_chains: 10_000 }
    }
}

impl Default for AisConfig {
    fn default() -> Self {
        Self { n_temps: 40, kernel: KernelSpec::rw(1.0, 1000), n_particles: 10_000 }
    }
}

/// Where the proposal-side metric samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    /// I.i.d. draws from the fitted proposal.
    #[default]
    Model,
    /// Proposal draws resampled by `pi / mu`.
    Reweighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    #[serde(flatten)]
    pub config: MetricConfig,
    pub source: MetricSource,
    /// Evaluate after every iteration rather than only at the end.
    pub every_iteration: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { config: MetricConfig::default(), source: MetricSource::Model, every_iteration: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub n_repeats: usize,
    pub out_dir: PathBuf,
    pub method: Method,
    pub target: TargetSpec,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em2c: Option<Em2cSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rw: Option<RwSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ais: Option<AisConfig>,
    pub metrics: MetricSettings,
}

impl ExperimentSpec {
    fn bare(name: &str, method: Method, target: TargetSpec) -> Self {
        Self {
            name: name.to_string(),
            seed: 0,
            n_repeats: 1,
            out_dir: PathBuf::from("runs").join(name),
            method,
            target,
            initial: InitialSpec::default(),
            em2c: None,
            rw: None,
            ais: None,
            metrics: MetricSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_repeats == 0 {
            return bad("n_repeats must be >= 1".into());
        }
        if self.metrics.config.n_projections == 0 {
            return bad("metrics.n_projections must be >= 1".into());
        }
        let dim = self.target.dim();
        if dim != 1 && dim % 2 != 0 {
            return bad(format!("dimension {dim} must be 1 or even for the block projection"));
        }
        self.target.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.method {
            Method::Em2c => {
                let s = self.em2c.as_ref().ok_or_else(|| ConfigError::Invalid("method em2c needs an [em2c] section".into()))?;
                s.config(0, false).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            Method::Rw => {
                let s = self.rw.as_ref().ok_or_else(|| ConfigError::Invalid("method rw needs an [rw] section".into()))?;
                KernelSpec::rw(s.sigma, s.n_iter.max(1)).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if s.n_chains == 0 {
                    return bad("rw.n_chains must be >= 1".into());
                }
            }
            Method::Ais => {
                let s = self.ais.as_ref().ok_or_else(|| ConfigError::Invalid("method ais needs an [ais] section".into()))?;
                s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        if dim == 1 {
            self.initial.build::<1>(dim)?;
        } else {
            self.initial.build::<2>(dim)?;
        }
        Ok(())
    }

    /// Population size of the method, which is also the default metric
    /// sample size.
    pub fn n_particles(&self) -> usize {
        match self.method {
            Method::Em2c => self.em2c.as_ref().map_or(0, |s| s.n_particles),
            Method::Rw => self.rw.as_ref().map_or(0, |s| s.n_chains),
            Method::Ais => self.ais.as_ref().map_or(0, |s| s.n_particles),
        }
    }

    pub fn metric_samples(&self) -> usize {
        self.metrics.config.n_samples.unwrap_or_else(|| self.n_particles())
    }

    /// Seed of repeat `r`, derived from the master seed.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        SeedStream::new(self.seed).child(r as u64).key()
    }

    /// Transition counts of one repeat.
    pub fn budget(&self) -> Budget {
        match self.method {
            Method::Em2c => {
                let s = self.em2c.as_ref().expect("validated");
                let per = (s.n_particles * s.n_iterations) as u64;
                Budget {
                    per_chain: (s.kernel.n_steps * s.n_iterations) as u64,
                    kernel: per * s.kernel.n_steps as u64,
                    local_move: s.local_move.map_or(0, |lm| per * lm.n_steps as u64),
                }
            }
            Method::Rw => {
                let s = self.rw.as_ref().expect("validated");
                Budget { per_chain: s.n_iter as u64, kernel: (s.n_iter * s.n_chains) as u64, local_move: 0 }
            }
            Method::Ais => {
                let s = self.ais.as_ref().expect("validated");
                let per = (s.n_temps * s.kernel.n_steps) as u64;
                Budget { per_chain: per, kernel: per * s.n_particles as u64, local_move: 0 }
            }
        }
    }

    /// The resolved spec as TOML followed by the budget, for dry runs.
    pub fn describe(&self) -> String {
        let mut s = toml::to_string_pretty(self).unwrap_or_else(|e| format!("# cannot render spec: {e}\n"));
        let b = self.budget();
        let _ = writeln!(
            s,
            "\n# budget per repeat: {} kernel applications ({} per particle), {} local-move applications",
            b.kernel, b.per_chain, b.local_move
        );
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    /// Transitions along one particle's path: `n_K T` for EM2C.
    pub per_chain: u64,
    /// All exploration transitions: `N n_K T` for EM2C.
    pub kernel: u64,
    pub local_move: u64,
}

/// `(d, kernel, step, n_K, T)` rows of the exploration-kernel tables.
fn gm_table(id: TargetId, d: usize, ula: bool) -> Option<(f64, usize, usize)> {
    let row = match (id, ula) {
        (TargetId::Gm2, false) => match d {
            2 | 4 => (6.0, 20, 25),
            10 => (8.0, 20, 30),
            20 => (7.0, 20, 30),
            _ => return None,
        },
        (TargetId::Gm2, true) => match d {
            2 | 4 => (2.3, 15, 25),
            10 | 20 => (2.3, 15, 30),
            _ => return None,
        },
        (TargetId::Gm4, false) => match d {
            2 | 4 | 10 => (4.5, 15, 25),
            20 => (5.0, 15, 25),
            _ => return None,
        },
        (TargetId::Gm4, true) => match d {
            2 | 4 | 10 | 20 => (2.0, 10, 25),
            _ => return None,
        },
        (TargetId::Gm25, false) => match d {
            2 | 4 => (1.5, 10, 15),
            10 => (2.0, 15, 20),
            20 => (2.5, 20, 25),
            _ => return None,
        },
        (TargetId::Gm25, true) => match d {
            2 | 4 => (0.3, 10, 15),
            10 => (0.3, 10, 20),
            20 => (0.35, 10, 25),
            _ => return None,
        },
        _ => return None,
    };
    Some(row)
}

fn gm_preset(name: &str) -> Option<ExperimentSpec> {
    let mut parts = name.split('-');
    let (id, k0) = match parts.next()? {
        "gm2" => (TargetId::Gm2, 2),
        "gm4" => (TargetId::Gm4, 4),
        "gm25" => (TargetId::Gm25, 25),
        _ => return None,
    };
    let d: usize = parts.next()?.strip_prefix('d')?.parse().ok()?;
    let ula = match parts.next()? {
        "rw" => false,
        "ula" => true,
        _ => return None,
    };
    let l = parts.next()?.strip_prefix('l')?;
    if parts.next().is_some() || l.len() != 2 || !l.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let lambda = if l == "10" { 1.0 } else { l.parse::<f64>().ok()? / 10.0 };
    if !(lambda > 0.0) {
        return None;
    }
    let (step, n_k, t) = gm_table(id, d, ula)?;
    let mut spec = ExperimentSpec::bare(name, Method::Em2c, TargetSpec::new(id).with_dim(d));
    spec.n_repeats = 3;
    spec.em2c = Some(Em2cSettings {
        epsilon: 0.8,
        lambda: LambdaSchedule::Constant(lambda),
        n_particles: 2000,
        n_iterations: t,
        kernel: if ula { KernelSpec::ula(step, n_k) } else { KernelSpec::rw(step, n_k) },
        local_move: None,
        projection: EmFitConfig::with_k0(k0),
        resampling: Resampling::Multinomial,
    });
    spec.metrics.config.n_samples = Some(2000);
    Some(spec)
}

fn benchmark_2d_preset(name: &str) -> Option<ExperimentSpec> {
    let (shape, method) = name.split_once('-')?;
    let (id, sigma, mean) = match shape {
        "moons" => (TargetId::DualMoons, 1.0, vec![1.0, 1.0]),
        "rings" => (TargetId::TwoRings, 0.9, vec![0.0, 0.0]),
        _ => return None,
    };
    let method = match method {
        "em2c" => Method::Em2c,
        "rw" => Method::Rw,
        "ais" => Method::Ais,
        _ => return None,
    };
    let n = 10_000;
    let mut spec = ExperimentSpec::bare(name, method, TargetSpec::new(id));
    spec.n_repeats = 3;
    spec.initial = InitialSpec { mean: MeanSpec::Vector(mean), var: 0.04, modes: None };
    spec.metrics.config.n_samples = Some(n);
    match method {
        Method::Em2c => {
            spec.em2c = Some(Em2cSettings {
                epsilon: 0.8,
                lambda: LambdaSchedule::Constant(0.8),
                n_particles: n,
                n_iterations: 6,
                kernel: KernelSpec::rw(sigma, 10),
                local_move: Some(KernelSpec::rw(0.1, 5)),
                projection: EmFitConfig::with_k0(32),
                resampling: Resampling::Multinomial,
            });
            spec.metrics.source = MetricSource::Reweighted;
        }
        Method::Rw => spec.rw = Some(RwSettings { sigma, n_iter: 1000, n_chains: n }),
        Method::Ais => spec.ais = Some(AisConfig { n_temps: 40, kernel: KernelSpec::rw(sigma, 1000), n_particles: n }),
    }
    Some(spec)
}

/// The one-dimensional bimodal study: proposal modes at -1 and 1, target
/// modes at 0 and 10.
fn fig1_preset(name: &str) -> Option<ExperimentSpec> {
    let lambda = match name {
        "fig1-emd" => 1.0,
        "fig1-em2c" => 0.8,
        _ => return None,
    };
    let mut spec = ExperimentSpec::bare(name, Method::Em2c, TargetSpec::new(TargetId::Bimodal1d));
    spec.n_repeats = 3;
    spec.initial = InitialSpec { mean: MeanSpec::Scalar(0.0), var: 1.0, modes: Some(vec![-1.0, 1.0]) };
    spec.em2c = Some(Em2cSettings {
        epsilon: 0.8,
        lambda: LambdaSchedule::Constant(lambda),
        n_particles: 5000,
        n_iterations: 15,
        kernel: KernelSpec::rw(4.0, 10),
        local_move: None,
        projection: EmFitConfig::with_k0(2),
        resampling: Resampling::Multinomial,
    });
    Some(spec)
}

/// Built-in presets. GM names follow `gm{2,4,25}-d{d}-{rw,ula}-l{XY}` with
/// `lXY = 0.XY` (`l10` is 1.0); 2D names are `{moons,rings}-{em2c,rw,ais}`.
pub fn preset(name: &str) -> Result<ExperimentSpec, ConfigError> {
    gm_preset(name)
        .or_else(|| benchmark_2d_preset(name))
        .or_else(|| fig1_preset(name))
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

/// A few representative preset names, for help text.
pub const PRESET_EXAMPLES: &[&str] = &[
    "gm4-d10-ula-l08",
    "gm25-d4-ula-l05",
    "gm2-d20-rw-l10",
    "moons-em2c",
    "rings-rw",
    "moons-ais",
    "fig1-emd",
    "fig1-em2c",
];

macro_rules! patch {
    ($name:ident for $target:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            $(#[serde(default)] $field: Option<$ty>,)*
        }

        impl $name {
            fn apply(self, to: &mut $target) {
                $(if let Some(v) = self.$field { to.$field = v; })*
            }
        }
    };
}

patch!(Em2cPatch for Em2cSettings {
    epsilon: f64,
    lambda: LambdaSchedule,
    n_particles: usize,
    n_iterations: usize,
    kernel: KernelSpec,
    projection: EmFitConfig,
    resampling: Resampling,
});
patch!(RwPatch for RwSettings { sigma: f64, n_iter: usize, n_chains: usize });
patch!(AisPatch for AisConfig { n_temps: usize, kernel: KernelSpec, n_particles: usize });
patch!(MetricConfigPatch for MetricConfig {
    n_projections: usize,
    seed: u64,
    unbiased_energy: bool,
    energy: bool,
});

/// `[em2c]` table: the generated fields plus `local_move`, which can be
/// switched off with `local_move = false`.
#[derive(Debug, Default, Deserialize)]
struct Em2cTable {
    #[serde(default)]
    local_move: Option<LocalMoveValue>,
    #[serde(flatten)]
    rest: toml::Table,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LocalMoveValue {
    Off(bool),
    On(KernelSpec),
}

#[derive(Debug, Default, Deserialize)]
struct MetricsTable {
    #[serde(default)]
    n_samples: Option<usize>,
    #[serde(default)]
    source: Option<MetricSource>,
    #[serde(default)]
    every_iteration: Option<bool>,
    #[serde(flatten)]
    rest: toml::Table,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    preset: Option<String>,
    name: Option<String>,
    seed: Option<u64>,
    n_repeats: Option<usize>,
    out_dir: Option<PathBuf>,
    method: Option<Method>,
    target: Option<TargetSpec>,
    initial: Option<InitialSpec>,
    em2c: Option<Em2cTable>,
    rw: Option<RwPatch>,
    ais: Option<AisPatch>,
    metrics: Option<MetricsTable>,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

fn parse_error(path: &str, text: &str, err: toml::de::Error) -> ConfigError {
    let (line, column) = err.span().map_or((1, 1), |s| line_column(text, s.start));
    ConfigError::Parse { path: path.to_string(), line, column, message: err.message().to_string() }
}

/// Nested tables captured by `flatten` lose their spans, so unknown keys are
/// reported at the table header.
fn table_error(path: &str, text: &str, table: &str, err: toml::de::Error) -> ConfigError {
    let header = format!("[{table}]");
    let (line, column) = text.find(&header).map_or((1, 1), |o| line_column(text, o));
    ConfigError::Parse { path: path.to_string(), line, column, message: format!("in [{table}]: {}", err.message()) }
}

/// Parses spec text; `path` is only used in error messages.
pub fn parse_spec(text: &str, path: &str) -> Result<ExperimentSpec, ConfigError> {
    let file: SpecFile = toml::from_str(text).map_err(|e| parse_error(path, text, e))?;
    let mut spec = match (&file.preset, &file.target, file.method) {
        (Some(name), _, _) => preset(name)?,
        (None, Some(t), Some(m)) => ExperimentSpec::bare(file.name.as_deref().unwrap_or("experiment"), m, t.clone()),
        _ => return Err(ConfigError::Invalid("a spec needs either `preset` or both `method` and `[target]`".into())),
    };
    if let Some(v) = file.name {
        spec.out_dir = PathBuf::from("runs").join(&v);
        spec.name = v;
    }
    if let Some(v) = file.seed {
        spec.seed = v;
    }
    if let Some(v) = file.n_repeats {
        spec.n_repeats = v;
    }
    if let Some(v) = file.out_dir {
        spec.out_dir = v;
    }
    if let Some(v) = file.method {
        spec.method = v;
    }
    if let Some(v) = file.target {
        spec.target = v;
    }
    if let Some(v) = file.initial {
        spec.initial = v;
    }
    if let Some(t) = file.em2c {
        let patch: Em2cPatch = t.rest.try_into().map_err(|e| table_error(path, text, "em2c", e))?;
        let s = spec.em2c.get_or_insert_with(Em2cSettings::default);
        patch.apply(s);
        match t.local_move {
            Some(LocalMoveValue::Off(false)) => s.local_move = None,
            Some(LocalMoveValue::Off(true)) => return Err(ConfigError::Invalid("em2c.local_move = true needs a kernel table".into())),
            Some(LocalMoveValue::On(k)) => s.local_move = Some(k),
            None => {}
        }
    }
    if let Some(p) = file.rw {
        p.apply(spec.rw.get_or_insert_with(RwSettings::default));
    }
    if let Some(p) = file.ais {
        p.apply(spec.ais.get_or_insert_with(AisConfig::default));
    }
    if let Some(m) = file.metrics {
        let patch: MetricConfigPatch = m.rest.try_into().map_err(|e| table_error(path, text, "metrics", e))?;
        patch.apply(&mut spec.metrics.config);
        if m.n_samples.is_some() {
            spec.metrics.config.n_samples = m.n_samples;
        }
        if let Some(v) = m.source {
            spec.metrics.source = v;
        }
        if let Some(v) = m.every_iteration {
            spec.metrics.every_iteration = v;
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_spec(&text, &path.display().to_string())
}

/// Frozen target samples and projection directions shared by every
/// evaluation of an experiment.
pub struct Evaluator {
    reference: ParticleCloud,
    settings: MetricSettings,
}

impl Evaluator {
    pub fn new(target: &dyn Target, settings: &MetricSettings, n: usize) -> Result<Self, ExperimentError> {
        let stream = SeedStream::new(settings.config.seed).child(purpose::REFERENCE);
        let reference = target.sample_reference(n, stream).map_err(|e| ExperimentError::Reference(e.to_string()))?;
        Ok(Self { reference, settings: settings.clone() })
    }

    pub fn reference(&self) -> &ParticleCloud {
        &self.reference
    }

    /// Proposal-side sample for a metric evaluation, following the
    /// configured source.
    pub fn proposal_sample(&self, model: &dyn ProposalModel, target: &dyn Target, stream: SeedStream) -> ParticleCloud {
        let n = self.reference.len();
        let mut x = model.sample(n, stream.child(purpose::SAMPLE));
        match self.settings.source {
            MetricSource::Model => x,
            MetricSource::Reweighted => {
                let w = x.points().map(|p| target.log_density(p) - model.log_density(p)).collect();
                x.set_log_weights(w).expect("one weight per point");
                // All-zero weights leave nothing to resample; fall back to the raw draw.
                equalize(&x, n, stream.child(purpose::RESAMPLE)).unwrap_or_else(|| {
                    let d = x.dim();
                    ParticleCloud::new(d, x.into_flat()).expect("consistent shape")
                })
            }
        }
    }

    /// `(SW2, ED)` against the reference; `cloud` is resampled to the
    /// reference size first when needed. ED is `None` when disabled.
    pub fn evaluate(&self, cloud: &ParticleCloud, stream: SeedStream) -> (f64, Option<f64>) {
        let n = self.reference.len();
        let eq = equalize(cloud, n, stream.child(purpose::RESAMPLE));
        let Some(c) = eq else {
            return (f64::NAN, None);
        };
        let dirs = SeedStream::new(self.settings.config.seed).child(purpose::METRIC);
        let sw = sliced_wasserstein(&c, &self.reference, self.settings.config.n_projections, dirs).unwrap_or(f64::NAN);
        let ed = self
            .settings
            .config
            .energy
            .then(|| energy_distance(&c, &self.reference, self.settings.config.unbiased_energy).unwrap_or(f64::NAN));
        (sw, ed)
    }
}

/// One CSV row of a repeat's trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub ess_x: Option<f64>,
    pub ess_y: Option<f64>,
    pub sw2: Option<f64>,
    pub ed: Option<f64>,
    pub lambda: Option<f64>,
    pub wall_ms: Option<f64>,
}

pub const TRACE_HEADER: &str = "iteration,ess_x,ess_y,sw2,ed,lambda,wall_ms";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            cell(self.ess_x),
            cell(self.ess_y),
            cell(self.sw2),
            cell(self.ed),
            cell(self.lambda),
            cell(self.wall_ms)
        )
    }
}

#[derive(Clone, Debug)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub kernel_applications: u64,
    pub local_move_applications: u64,
    pub error: Option<String>,
}

impl RepeatResult {
    pub fn final_sw2(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.sw2)
    }

    pub fn final_ed(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.ed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; zero for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub repeats: Vec<RepeatResult>,
}

pub const SUMMARY_HEADER: &str = "repeats,failed,sw2_mean,sw2_std,ed_mean,ed_std,kernel_applications,local_move_applications";

impl ExperimentReport {
    pub fn failed(&self) -> usize {
        self.repeats.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn summary_csv(&self) -> String {
        let ok: Vec<&RepeatResult> = self.repeats.iter().filter(|r| r.error.is_none()).collect();
        let sw: Vec<f64> = ok.iter().filter_map(|r| r.final_sw2()).collect();
        let ed: Vec<f64> = ok.iter().filter_map(|r| r.final_ed()).collect();
        let stat = |v: &[f64]| if v.is_empty() { (String::new(), String::new()) } else {
            let (m, s) = mean_std(v);
            (m.to_string(), s.to_string())
        };
        let (swm, sws) = stat(&sw);
        let (edm, eds) = stat(&ed);
        let kernel = self.repeats.first().map_or(0, |r| r.kernel_applications);
        let local = self.repeats.first().map_or(0, |r| r.local_move_applications);
        format!("{SUMMARY_HEADER}\n{},{},{swm},{sws},{edm},{eds},{kernel},{local}\n", self.repeats.len(), self.failed())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Measure per-iteration wall time; off gives byte-identical traces.
    pub record_timing: bool,
}

fn dispatch_em2c(spec: &ExperimentSpec, target: &dyn Target, eval: &Evaluator, r: usize, opts: RunOptions) -> RepeatResult {
    if spec.target.dim() == 1 {
        em2c_repeat::<1>(spec, target, eval, r, opts)
    } else {
        em2c_repeat::<2>(spec, target, eval, r, opts)
    }
}

fn metric_stream(spec: &ExperimentSpec, r: usize, t: usize) -> SeedStream {
    SeedStream::new(spec.metrics.config.seed).path(&[purpose::METRIC, r as u64, t as u64])
}

fn em2c_repeat<const B: usize>(spec: &ExperimentSpec, target: &dyn Target, eval: &Evaluator, r: usize, opts: RunOptions) -> RepeatResult {
    let seed = spec.repeat_seed(r);
    let settings = spec.em2c.as_ref().expect("validated");
    let cfg = settings.config(seed, opts.record_timing);
    let initial = spec.initial.build::<B>(target.dim()).expect("validated");
    let (trace, error): (Em2cTrace<B>, _) = match run_em2c(&cfg, target, initial) {
        Ok(t) => (t, None),
        Err(f) => (f.trace, Some(f.error.to_string())),
    };
    let last = trace.entries.len() - 1;
    let rows = trace
        .entries
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let (sw2, ed) = if spec.metrics.every_iteration || t == last {
                let stream = metric_stream(spec, r, t);
                let x = eval.proposal_sample(&e.model, target, stream);
                let (s, d) = eval.evaluate(&x, stream);
                (Some(s), d)
            } else {
                (None, None)
            };
            let rec = e.record.as_ref();
            TraceRow {
                iteration: t,
                ess_x: rec.map(|r| r.ess_x),
                ess_y: rec.map(|r| r.ess_y),
                sw2,
                ed,
                lambda: rec.map(|r| r.lambda),
                wall_ms: rec.and_then(|r| r.wall_ms),
            }
        })
        .collect();
    RepeatResult {
        repeat: r,
        seed,
        rows,
        kernel_applications: trace.kernel_applications,
        local_move_applications: trace.local_move_applications,
        error,
    }
}

fn baseline_repeat<const B: usize>(spec: &ExperimentSpec, target: &dyn Target, eval: &Evaluator, r: usize, opts: RunOptions) -> RepeatResult {
    let seed = spec.repeat_seed(r);
    let initial = spec.initial.build::<B>(target.dim()).expect("validated");
    let start = opts.record_timing.then(Instant::now);
    let stream = SeedStream::new(seed);
    let (out, iteration, ess) = match spec.method {
        Method::Rw => {
            let s = spec.rw.expect("validated");
            (run_rw_population(target, &initial, s.n_chains, s.sigma, s.n_iter, stream).map(|o| (o.cloud, o.applications)), s.n_iter, None)
        }
        Method::Ais => {
            let s = spec.ais.expect("validated");
            let out = run_ais(target, &initial, &s, stream);
            let ess = out.as_ref().ok().map(|o| o.cloud.ess());
            (out.map(|o| (o.cloud, o.applications)), s.n_temps, ess)
        }
        Method::Em2c => unreachable!("EM2C repeats use em2c_repeat"),
    };
    let wall_ms = start.map(|s| s.elapsed().as_secs_f64() * 1e3);
    match out {
        Ok((cloud, applications)) => {
            let (sw2, ed) = eval.evaluate(&cloud, metric_stream(spec, r, iteration));
            RepeatResult {
                repeat: r,
                seed,
                rows: vec![TraceRow { iteration, ess_x: ess, ess_y: None, sw2: Some(sw2), ed, lambda: None, wall_ms }],
                kernel_applications: applications,
                local_move_applications: 0,
                error: None,
            }
        }
        Err(e) => RepeatResult {
            repeat: r,
            seed,
            rows: Vec::new(),
            kernel_applications: 0,
            local_move_applications: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every repeat (in parallel) and returns the traces without writing
/// anything.
pub fn execute(spec: &ExperimentSpec, opts: RunOptions) -> Result<ExperimentReport, ExperimentError> {
    spec.validate()?;
    let target = spec.target.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let eval = Evaluator::new(target.as_ref(), &spec.metrics, spec.metric_samples())?;
    let repeats = (0..spec.n_repeats)
        .into_par_iter()
        .map(|r| match (spec.method, spec.target.dim()) {
            (Method::Em2c, _) => dispatch_em2c(spec, target.as_ref(), &eval, r, opts),
            (_, 1) => baseline_repeat::<1>(spec, target.as_ref(), &eval, r, opts),
            _ => baseline_repeat::<2>(spec, target.as_ref(), &eval, r, opts),
        })
        .collect();
    Ok(ExperimentReport { repeats })
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let io_err = |source| ExperimentError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(contents.as_bytes()).map_err(io_err)
}

/// Runs the experiment and writes `repeat_<r>.csv`, `summary.csv` and the
/// resolved `spec.toml` into `spec.out_dir`, replacing earlier files.
pub fn run_experiment(spec: &ExperimentSpec, opts: RunOptions) -> Result<ExperimentReport, ExperimentError> {
    let report = execute(spec, opts)?;
    fs::create_dir_all(&spec.out_dir).map_err(|source| ExperimentError::Io { path: spec.out_dir.display().to_string(), source })?;
    for r in &report.repeats {
        write_file(&spec.out_dir.join(format!("repeat_{}.csv", r.repeat)), &r.to_csv())?;
    }
    write_file(&spec.out_dir.join("summary.csv"), &report.summary_csv())?;
    write_file(&spec.out_dir.join("spec.toml"), &spec.describe())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gm4_preset_values() {
        let s = preset("gm4-d10-ula-l08").unwrap();
        let e = s.em2c.as_ref().unwrap();
        assert_eq!(e.epsilon, 0.8);
        assert_eq!(e.lambda, LambdaSchedule::Constant(0.8));
        assert_eq!(e.n_particles, 2000);
        assert_eq!(e.kernel, KernelSpec::ula(2.0, 10));
        assert_eq!(e.n_iterations, 25);
        assert_eq!(e.projection.k0, 4);
        assert_eq!(s.target.dim(), 10);
        assert_eq!(preset("gm25-d4-ula-l10").unwrap().em2c.unwrap().lambda, LambdaSchedule::Constant(1.0));
        assert_eq!(preset("gm25-d4-ula-l05").unwrap().em2c.unwrap().kernel, KernelSpec::ula(0.3, 10));
    }

    #[test]
    fn rings_preset_values() {
        let s = preset("rings-em2c").unwrap();
        let e = s.em2c.unwrap();
        assert_eq!(e.kernel, KernelSpec::rw(0.9, 10));
        assert_eq!(e.local_move, Some(KernelSpec::rw(0.1, 5)));
        assert_eq!(e.n_iterations, 6);
        assert_eq!(e.lambda, LambdaSchedule::Constant(0.8));
        assert_eq!(e.projection.k0, 32);
    }

    #[test]
    fn unknown_presets() {
        for name in ["gm4-d3-ula-l08", "gm4-d10-mala-l08", "gm4-d10-ula-l8", "moons-nuts", "fig2"] {
            assert!(matches!(preset(name), Err(ConfigError::UnknownPreset(_))), "{name}");
        }
    }

    #[test]
    fn every_listed_preset_validates() {
        for name in PRESET_EXAMPLES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn file_overrides_preset() {
        let text = "preset = \"gm4-d10-ula-l08\"\nseed = 9\n[em2c]\nlambda = 0.5\nn_iterations = 3\n[metrics]\nsource = \"reweighted\"\nn_projections = 7\n";
        let s = parse_spec(text, "x.toml").unwrap();
        assert_eq!(s.seed, 9);
        let e = s.em2c.unwrap();
        assert_eq!(e.lambda, LambdaSchedule::Constant(0.5));
        assert_eq!(e.n_iterations, 3);
        assert_eq!(e.kernel, KernelSpec::ula(2.0, 10));
        assert_eq!(s.metrics.source, MetricSource::Reweighted);
        assert_eq!(s.metrics.config.n_projections, 7);
        assert_eq!(s.metrics.config.n_samples, Some(2000));
    }

    #[test]
    fn local_move_can_be_disabled() {
        let s = parse_spec("preset = \"moons-em2c\"\n[em2c]\nlocal_move = false\n", "x").unwrap();
        assert_eq!(s.em2c.unwrap().local_move, None);
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_spec("preset = \"gm4-d10-ula-l08\"\nbogus = 1\n", "f.toml").unwrap_err();
        match err {
            ConfigError::Parse { line, column, ref message, .. } => {
                assert_eq!((line, column), (2, 1), "{message}");
                assert!(message.contains("bogus"));
            }
            e => panic!("{e}"),
        }
        let err = parse_spec("preset = \"gm4-d10-ula-l08\"\n\n[em2c]\nstep = 1\n", "f.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
        let err = parse_spec("seed = [\n", "f.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1 | 2, .. }), "{err}");
        assert!(matches!(parse_spec("preset = \"nope\"", "f").unwrap_err(), ConfigError::UnknownPreset(_)));
        assert!(matches!(parse_spec("preset = \"gm4-d10-ula-l08\"\nn_repeats = 0", "f").unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn spec_without_preset() {
        let text = "method = \"rw\"\n[target]\nid = \"two_rings\"\n[initial]\nmean = 0.0\nvar = 0.04\n[rw]\nsigma = 0.9\nn_iter = 5\nn_chains = 10\n";
        let s = parse_spec(text, "x").unwrap();
        assert_eq!(s.rw, Some(RwSettings { sigma: 0.9, n_iter: 5, n_chains: 10 }));
        assert!(parse_spec("method = \"rw\"\n", "x").is_err());
    }

    #[test]
    fn described_spec_round_trips() {
        for name in ["gm4-d10-ula-l08", "moons-em2c", "rings-ais", "fig1-em2c"] {
            let s = preset(name).unwrap();
            let text = s.describe();
            let back = parse_spec(&text, "described").unwrap();
            assert_eq!(back, s, "{name}");
        }
    }

    #[test]
    fn budgets() {
        let s = preset("gm4-d10-ula-l08").unwrap();
        let b = s.budget();
        assert_eq!(b.kernel, 2000 * 10 * 25);
        assert_eq!(b.per_chain, 10 * 25);
        let rw = preset("moons-rw").unwrap().budget();
        assert_eq!((rw.per_chain, rw.kernel), (1000, 1000 * 10_000));
    }

    #[test]
    fn mixture_initial() {
        let init = InitialSpec { mean: MeanSpec::Scalar(0.0), var: 1.0, modes: Some(vec![-1.0, 1.0]) };
        let m = init.build::<1>(1).unwrap();
        let b = &m.blocks()[0];
        assert_eq!(b.weights(), vec![0.5, 0.5]);
        assert_eq!(b.means(), vec![[-1.0], [1.0]]);
        assert!(init.build::<2>(3).is_err());
    }

    fn small_spec(method: Method) -> ExperimentSpec {
        let mut s = match method {
            Method::Em2c => preset("gm4-d4-ula-l08").unwrap(),
            Method::Rw => preset("rings-rw").unwrap(),
            Method::Ais => preset("moons-ais").unwrap(),
        };
        s.n_repeats = 2;
        s.metrics.config.n_samples = Some(200);
        s.metrics.config.n_projections = 20;
        if let Some(e) = s.em2c.as_mut() {
            e.n_particles = 300;
            e.n_iterations = 3;
        }
        if let Some(r) = s.rw.as_mut() {
            r.n_chains = 200;
            r.n_iter = 20;
        }
        if let Some(a) = s.ais.as_mut() {
            a.n_particles = 200;
            a.n_temps = 4;
            a.kernel.n_steps = 5;
        }
        s
    }

    #[test]
    fn runs_write_traces_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        for method in [Method::Em2c, Method::Rw, Method::Ais] {
            let mut s = small_spec(method);
            s.out_dir = dir.path().join(format!("{method:?}"));
            let report = run_experiment(&s, RunOptions::default()).unwrap();
            assert_eq!(report.failed(), 0);
            let trace = fs::read_to_string(s.out_dir.join("repeat_0.csv")).unwrap();
            assert!(trace.starts_with(TRACE_HEADER));
            let summary = fs::read_to_string(s.out_dir.join("summary.csv")).unwrap();
            assert!(summary.starts_with(SUMMARY_HEADER));
            assert_eq!(report.repeats[0].kernel_applications, s.budget().kernel);
            // A second run replaces the files rather than appending.
            run_experiment(&s, RunOptions::default()).unwrap();
            assert_eq!(fs::read_to_string(s.out_dir.join("repeat_0.csv")).unwrap(), trace);
        }
    }

    #[test]
    fn em2c_trace_has_one_row_per_iteration() {
        let s = small_spec(Method::Em2c);
        let report = execute(&s, RunOptions::default()).unwrap();
        let rows = &report.repeats[0].rows;
        assert_eq!(rows.len(), 4);
        assert!(rows[0].ess_x.is_none() && rows[0].sw2.is_some());
        assert!(rows[3].lambda == Some(0.8));
        assert_ne!(report.repeats[0].seed, report.repeats[1].seed);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
