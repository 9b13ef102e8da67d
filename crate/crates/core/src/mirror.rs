//! The EM2C iteration: sample the proposal, push the sample through the
//! exploration kernel, weight both clouds with tempered importance ratios
//! against the same proposal, resample from the lambda-mixture, optionally
//! rejuvenate with a local move, and project back onto the mixture family.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{normalize_log_weights, ParticleCloud};
use crate::kernels::{apply_kernel, KernelError, KernelKind, KernelSpec};
use crate::projection::{fit_tensorized, EmFitConfig, ProjectionError, ProposalModel, TensorizedGmm};
use crate::rng::{purpose, SeedStream};
use crate::targets::Target;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MirrorError {
    #[error("invalid EM2C config: {0}")]
    Config(String),
    #[error("all importance weights of the {0} branch are zero")]
    DegenerateWeights(Branch),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("projection failed at iteration {iteration}: {error} ({diagnostics})")]
    Projection { iteration: usize, error: ProjectionError, diagnostics: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Draws from the current proposal.
    X,
    /// Kernel-propagated draws.
    Y,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::X => "X",
            Branch::Y => "Y",
        })
    }
}

/// Mixing weight of the mirror branch: constant, or one value per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSchedule {
    Constant(f64),
    PerIteration(Vec<f64>),
}

impl LambdaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            LambdaSchedule::Constant(l) => *l,
            LambdaSchedule::PerIteration(v) => v[t],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Em2cConfig {
    pub epsilon: f64,
    pub lambda: LambdaSchedule,
    pub n_particles: usize,
    pub n_iterations: usize,
    pub kernel: KernelSpec,
    pub local_move: Option<KernelSpec>,
    pub projection: EmFitConfig,
    pub resampling: Resampling,
    pub seed: u64,
    /// Measure wall time per iteration. Off gives byte-identical traces.
    pub record_timing: bool,
    /// Keep the resampled (and moved) cloud of every iteration in the trace.
    pub keep_particles: bool,
}

impl Em2cConfig {
    pub fn validate(&self) -> Result<(), MirrorError> {
        let bad = |m: String| Err(MirrorError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must be in (0, 1], got {}", self.epsilon));
        }
        let lambdas: Vec<f64> = match &self.lambda {
            LambdaSchedule::Constant(l) => vec![*l],
            LambdaSchedule::PerIteration(v) => {
                if v.len() < self.n_iterations {
                    return bad(format!("lambda schedule has {} entries for {} iterations", v.len(), self.n_iterations));
                }
                v.clone()
            }
        };
        if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return bad(format!("lambda must be in (0, 1], got {l}"));
        }
        if self.n_particles == 0 {
            return bad("n_particles must be >= 1".into());
        }
        self.kernel.validate()?;
        if let Some(lm) = &self.local_move {
            lm.validate()?;
            if lm.kind != KernelKind::Rw {
                return Err(KernelError::LocalMoveNotRw.into());
            }
        }
        self.projection.validate().map_err(|e| MirrorError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Log-weights plus the number of points where the proposal density vanished.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights {
    pub values: Vec<f64>,
    pub zero_density: usize,
}

/// `epsilon * (log pi(x) - log mu(x))` for each point, unnormalized. Points
/// already carrying weight `-inf` (flagged by the kernel), points where the
/// proposal density is zero and points with a non-finite ratio get `-inf`.
pub fn compute_log_weights(target: &dyn Target, proposal: &dyn ProposalModel, cloud: &ParticleCloud, epsilon: f64) -> LogWeights {
    let values: Vec<(f64, bool)> = cloud
        .points()
        .zip(cloud.log_weights())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(x, &prior)| {
            if prior == f64::NEG_INFINITY {
                return (f64::NEG_INFINITY, false);
            }
            let lq = proposal.log_density(x);
            if lq == f64::NEG_INFINITY || lq.is_nan() {
                return (f64::NEG_INFINITY, true);
            }
            let w = epsilon * (target.log_density(x) - lq);
            (if w.is_nan() || w == f64::INFINITY { f64::NEG_INFINITY } else { w }, false)
        })
        .collect();
    let zero_density = values.iter().filter(|v| v.1).count();
    LogWeights { values: values.into_iter().map(|v| v.0).collect(), zero_density }
}

/// The two-branch categorical `lambda sum w_i delta_{X_i} + (1 - lambda) sum v_i delta_{Y_i}`,
/// each branch normalized on its own.
#[derive(Clone, Debug)]
pub struct EmpiricalMixture {
    x: ParticleCloud,
    y: ParticleCloud,
    lambda: f64,
    cum_x: Vec<f64>,
    cum_y: Vec<f64>,
    /// Set when one branch was degenerate and its mass moved to the other.
    pub fell_back: Option<Branch>,
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = w
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// First index whose cumulative weight exceeds `u`; zero-weight atoms are
/// never selected.
fn categorical(cum: &[f64], u: f64) -> usize {
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// Builds the mixture from clouds whose log-weights are the branch weights.
///
/// A branch whose weights are all `-inf` is dropped and its mass moved to the
/// other branch (`fell_back` records the dropped branch) unless it is the
/// only branch with positive mass, which is an error.
pub fn build_empirical_mixture(x: ParticleCloud, y: ParticleCloud, lambda: f64) -> Result<EmpiricalMixture, MirrorError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(MirrorError::Config(format!("lambda must be in (0, 1], got {lambda}")));
    }
    let wx = normalize_log_weights(x.log_weights());
    let wy = if lambda < 1.0 { normalize_log_weights(y.log_weights()) } else { None };
    let (lambda, fell_back) = match (&wx, &wy, lambda < 1.0) {
        (Some(_), Some(_), _) | (Some(_), None, false) => (lambda, None),
        (Some(_), None, true) => (1.0, Some(Branch::Y)),
        (None, Some(_), _) => (0.0, Some(Branch::X)),
        (None, None, _) => return Err(MirrorError::DegenerateWeights(Branch::X)),
    };
    let cum_x = wx.as_deref().map(cumulative).unwrap_or_default();
    let cum_y = wy.as_deref().map(cumulative).unwrap_or_default();
    Ok(EmpiricalMixture { x, y, lambda, cum_x, cum_y, fell_back })
}

impl EmpiricalMixture {
    /// Probability of the X branch after any fallback.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn atom(&self, pick: Pick) -> &[f64] {
        match pick.branch {
            Branch::X => self.x.point(pick.index),
            Branch::Y => self.y.point(pick.index),
        }
    }

    /// Pick for a combined uniform position `u` in `[0, 1)`.
    fn locate(&self, u: f64) -> Pick {
        if u < self.lambda {
            Pick { branch: Branch::X, index: categorical(&self.cum_x, u / self.lambda) }
        } else {
            Pick { branch: Branch::Y, index: categorical(&self.cum_y, ((u - self.lambda) / (1.0 - self.lambda)).min(1.0 - f64::EPSILON)) }
        }
    }
}

/// Where a resampled particle came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pick {
    pub branch: Branch,
    pub index: usize,
}

/// `n` draws from the mixture. Multinomial draw `i` uses
/// `stream.particle(i)`: a Bernoulli(lambda) branch choice, then a categorical
/// draw within the branch. Systematic resampling uses one uniform offset from
/// `stream.rng()` over the concatenated branch weights.
pub fn resample(mix: &EmpiricalMixture, n: usize, stream: SeedStream, scheme: Resampling) -> (ParticleCloud, Vec<Pick>) {
    let picks: Vec<Pick> = match scheme {
        Resampling::Multinomial => (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.particle(i);
                let branch_u: f64 = rng.random();
                let within: f64 = rng.random();
                if branch_u < mix.lambda {
                    Pick { branch: Branch::X, index: categorical(&mix.cum_x, within) }
                } else {
                    Pick { branch: Branch::Y, index: categorical(&mix.cum_y, within) }
                }
            })
            .collect(),
        Resampling::Systematic => {
            let offset: f64 = stream.rng().random();
            (0..n).map(|i| mix.locate((i as f64 + offset) / n as f64)).collect()
        }
    };
    let dim = mix.x.dim();
    let mut points = Vec::with_capacity(n * dim);
    for &p in &picks {
        points.extend_from_slice(mix.atom(p));
    }
    (ParticleCloud::new(dim, points).expect("consistent shape"), picks)
}

/// Runs `spec.n_steps` random-walk steps on every particle of `cloud`.
pub fn local_move(cloud: &ParticleCloud, spec: &KernelSpec, target: &dyn Target, stream: SeedStream) -> Result<ParticleCloud, MirrorError> {
    if spec.kind != KernelKind::Rw {
        return Err(KernelError::LocalMoveNotRw.into());
    }
    Ok(apply_kernel(spec, target, cloud, stream)?.cloud)
}

/// Diagnostics of one iteration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ess_x: f64,
    pub ess_y: f64,
    /// Lambda actually used (after any degenerate-branch fallback).
    pub lambda: f64,
    pub zero_density: usize,
    pub flagged: usize,
    pub fell_back: Option<Branch>,
    pub kernel_applications: u64,
    pub local_move_applications: u64,
    pub wall_ms: Option<f64>,
}

/// Output of one iteration.
#[derive(Clone, Debug)]
pub struct IterationOutput<const B: usize> {
    pub model: TensorizedGmm<B>,
    pub record: IterationRecord,
    /// The (moved) resampled cloud the model was fitted on.
    pub particles: ParticleCloud,
}

/// One pass of the loop body. All randomness comes from
/// `stream.child(t)` split by purpose.
pub fn em2c_iterate<const B: usize>(
    proposal: &TensorizedGmm<B>,
    target: &dyn Target,
    cfg: &Em2cConfig,
    t: usize,
    stream: SeedStream,
) -> Result<IterationOutput<B>, MirrorError> {
    let start = cfg.record_timing.then(Instant::now);
    let it = stream.child(t as u64);
    let n = cfg.n_particles;
    let lambda = cfg.lambda.at(t);

    let x = proposal.sample(n, it.child(purpose::SAMPLE));
    let kernel_out = apply_kernel(&cfg.kernel, target, &x, it.child(purpose::KERNEL))?;
    let mut y = kernel_out.cloud;

    let mut x = x;
    let wx = compute_log_weights(target, proposal, &x, cfg.epsilon);
    let wy = compute_log_weights(target, proposal, &y, cfg.epsilon);
    x.set_log_weights(wx.values).expect("same length");
    y.set_log_weights(wy.values).expect("same length");
    let ess_x = x.ess();
    let ess_y = y.ess();

    let mix = build_empirical_mixture(x, y, lambda)?;
    let (mut z, _) = resample(&mix, n, it.child(purpose::RESAMPLE), cfg.resampling);
    let mut local_apps = 0;
    if let Some(lm) = &cfg.local_move {
        if lm.kind != KernelKind::Rw {
            return Err(KernelError::LocalMoveNotRw.into());
        }
        let moved = apply_kernel(lm, target, &z, it.child(purpose::LOCAL_MOVE))?;
        local_apps = moved.applications;
        // Flagged particles keep their pre-move position; weights stay uniform.
        z = ParticleCloud::new(moved.cloud.dim(), moved.cloud.into_flat()).expect("consistent shape");
    }
    let model = fit_tensorized::<B>(&z, &cfg.projection, it.child(purpose::PROJECT)).map_err(|error| MirrorError::Projection {
        iteration: t,
        diagnostics: format!("ess_x={ess_x:.1} ess_y={ess_y:.1} lambda={:.3}", mix.lambda()),
        error,
    })?;
    let record = IterationRecord {
        iteration: t + 1,
        ess_x,
        ess_y,
        lambda: mix.lambda(),
        zero_density: wx.zero_density + wy.zero_density,
        flagged: kernel_out.flagged,
        fell_back: mix.fell_back,
        kernel_applications: kernel_out.applications,
        local_move_applications: local_apps,
        wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
    };
    Ok(IterationOutput { model, record, particles: z })
}

/// One trace row: the proposal after `iteration` updates.
#[derive(Clone, Debug)]
pub struct TraceEntry<const B: usize> {
    pub model: TensorizedGmm<B>,
    /// `None` for the initial proposal.
    pub record: Option<IterationRecord>,
    pub particles: Option<ParticleCloud>,
}

/// Warning counters accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Warnings {
    /// Iterations where an ESS fell below 1% of N.
    pub low_ess: usize,
    pub zero_density: usize,
    pub flagged_particles: usize,
    pub branch_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct Em2cTrace<const B: usize> {
    /// `T + 1` entries when the run completed.
    pub entries: Vec<TraceEntry<B>>,
    pub kernel_applications: u64,
    pub local_move_applications: u64,
    pub warnings: Warnings,
}

impl<const B: usize> Em2cTrace<B> {
    pub fn final_model(&self) -> &TensorizedGmm<B> {
        &self.entries.last().expect("trace holds the initial model").model
    }
}

/// A failed run with everything computed before the failure.
#[derive(Clone, Debug, Error)]
#[error("EM2C stopped after {} iterations: {error}", .trace.entries.len().saturating_sub(1))]
pub struct RunFailure<const B: usize> {
    pub trace: Em2cTrace<B>,
    pub error: MirrorError,
}

/// Runs `cfg.n_iterations` iterations from `initial`, drawing every random
/// number from `SeedStream::new(cfg.seed)`.
pub fn run_em2c<const B: usize>(cfg: &Em2cConfig, target: &dyn Target, initial: TensorizedGmm<B>) -> Result<Em2cTrace<B>, Box<RunFailure<B>>> {
    run_em2c_with_stream(cfg, target, initial, SeedStream::new(cfg.seed))
}

/// As [`run_em2c`] with an explicit root stream.
pub fn run_em2c_with_stream<const B: usize>(
    cfg: &Em2cConfig,
    target: &dyn Target,
    initial: TensorizedGmm<B>,
    stream: SeedStream,
) -> Result<Em2cTrace<B>, Box<RunFailure<B>>> {
    let mut trace = Em2cTrace {
        entries: vec![TraceEntry { model: initial, record: None, particles: None }],
        kernel_applications: 0,
        local_move_applications: 0,
        warnings: Warnings::default(),
    };
    let fail = |trace: Em2cTrace<B>, error| Err(Box::new(RunFailure { trace, error }));
    if let Err(e) = cfg.validate() {
        return fail(trace, e);
    }
    if trace.entries[0].model.dim() != target.dim() {
        let e = MirrorError::Config(format!("proposal dimension {} != target dimension {}", trace.entries[0].model.dim(), target.dim()));
        return fail(trace, e);
    }
    let low = 0.01 * cfg.n_particles as f64;
    for t in 0..cfg.n_iterations {
        let current = &trace.entries.last().unwrap().model;
        match em2c_iterate(current, target, cfg, t, stream) {
            Ok(out) => {
                let r = &out.record;
                trace.kernel_applications += r.kernel_applications;
                trace.local_move_applications += r.local_move_applications;
                let w = &mut trace.warnings;
                w.low_ess += usize::from(r.ess_x < low || (r.lambda < 1.0 && r.ess_y < low));
                w.zero_density += r.zero_density;
                w.flagged_particles += r.flagged;
                w.branch_fallbacks += usize::from(r.fell_back.is_some());
                trace.entries.push(TraceEntry {
                    model: out.model,
                    record: Some(out.record),
                    particles: cfg.keep_particles.then_some(out.particles),
                });
            }
            Err(e) => return fail(trace, e),
        }
    }
    Ok(trace)
}
