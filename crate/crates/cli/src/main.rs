use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use em2c::exact_grid::{self, Grid, GridKernel, GridLambda, GridMeasure};
use em2c::experiment::{self, ExperimentSpec, Method, RunOptions, PRESET_EXAMPLES};
use em2c::targets::{bimodal_1d, Target};

#[derive(Parser)]
#[command(name = "em2c", version, about = "Entropic mirror Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a spec file or a built-in preset.
    Run {
        /// TOML spec file.
        spec: Option<PathBuf>,
        /// Built-in preset, e.g. gm4-d10-ula-l08, rings-em2c, moons-ais.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Exact iterates on a 1D grid for the bimodal target; prints t,kl,tv,lambda.
    ExactGrid(ExactGridArgs),
    /// Baseline samplers with the 2D benchmark presets.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        #[arg(value_enum)]
        target: Benchmark,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// List preset name patterns.
    Presets,
}

#[derive(Args)]
struct CommonArgs {
    /// Master seed (overrides the spec).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repeats (overrides the spec).
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory (overrides the spec).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved spec and budget without sampling.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Leave wall_ms empty so traces are byte-identical across runs.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Rw,
    Ais,
}

#[derive(Clone, Copy, ValueEnum)]
enum Benchmark {
    Moons,
    Rings,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKernelArg {
    Rw,
    Ula,
    Identity,
}

#[derive(Args)]
struct ExactGridArgs {
    #[arg(long, default_value_t = 4096)]
    m: usize,
    #[arg(long, default_value_t = -8.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 18.0)]
    hi: f64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, value_enum, default_value_t = GridKernelArg::Rw)]
    kernel: GridKernelArg,
    /// RW proposal standard deviation.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    /// ULA step size.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Constant mixing weight; adaptive when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fallback weight of the adaptive rule.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Mean of the Gaussian initial measure (unit variance).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mu0: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(mut spec: ExperimentSpec, common: &CommonArgs) -> Result<ExitCode> {
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(r) = common.repeats {
        spec.n_repeats = r;
    }
    if let Some(o) = &common.out {
        spec.out_dir = o.clone();
    }
    spec.validate()?;
    if common.dry_run {
        print!("{}", spec.describe());
        return Ok(ExitCode::SUCCESS);
    }
    set_threads(common.threads)?;
    let report = experiment::run_experiment(&spec, RunOptions { record_timing: !common.no_timing })?;
    for r in &report.repeats {
        match (&r.error, r.final_sw2()) {
            (Some(e), _) => eprintln!("repeat {} (seed {}) failed: {e}", r.repeat, r.seed),
            (None, sw) => eprintln!("repeat {}: final sw2 {}", r.repeat, sw.map_or("n/a".into(), |v| format!("{v:.4}"))),
        }
    }
    print!("{}", report.summary_csv());
    eprintln!("wrote {}", spec.out_dir.display());
    Ok(if report.failed() > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn exact(args: &ExactGridArgs) -> Result<ExitCode> {
    set_threads(args.threads)?;
    let grid = Grid::new(args.lo, args.hi, args.m)?;
    let target = bimodal_1d();
    let pi = GridMeasure::from_target(grid, &target as &dyn Target)?;
    let mu0 = GridMeasure::from_log_density(grid, |x| -0.5 * (x - args.mu0).powi(2))?;
    let k = match args.kernel {
        GridKernelArg::Rw => exact_grid::discretize_rw_kernel(&pi, args.sigma)?,
        GridKernelArg::Ula => exact_grid::discretize_ula_kernel(grid, &target, args.gamma)?,
        GridKernelArg::Identity => GridKernel::identity(args.m),
    };
    let lambda = match args.lambda {
        Some(l) => GridLambda::Constant(l),
        None => GridLambda::Adaptive { beta: args.beta },
    };
    let rows = exact_grid::run_exact(&pi, &mu0, &k, args.epsilon, lambda, args.iterations)?;
    let mut csv = String::from("t,kl,tv,lambda\n");
    for r in rows {
        csv.push_str(&format!("{},{},{},{}\n", r.t, r.kl, r.tv, r.lambda.map(|l| l.to_string()).unwrap_or_default()));
    }
    match &args.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { spec, preset, common } => {
            let loaded = match (spec, preset) {
                (Some(path), _) => experiment::load_spec(path).map_err(anyhow::Error::from),
                (None, Some(name)) => experiment::preset(name).map_err(anyhow::Error::from),
                (None, None) => Err(anyhow::anyhow!("give a spec file or --preset NAME")),
            };
            loaded.and_then(|s| run(s, common))
        }
        Command::Baseline { method, target, common } => {
            let name = format!(
                "{}-{}",
                match target {
                    Benchmark::Moons => "moons",
                    Benchmark::Rings => "rings",
                },
                match method {
                    BaselineMethod::Rw => "rw",
                    BaselineMethod::Ais => "ais",
                }
            );
            experiment::preset(&name).map_err(anyhow::Error::from).and_then(|s| {
                debug_assert!(matches!(s.method, Method::Rw | Method::Ais));
                run(s, common)
            })
        }
        Command::ExactGrid(args) => exact(args),
        Command::Presets => {
            println!("gm{{2,4,25}}-d<d>-{{rw,ula}}-l<XY>   lambda 0.XY (l10 = 1.0), kernel table values");
            println!("{{moons,rings}}-{{em2c,rw,ais}}        2D benchmarks");
            println!("fig1-emd, fig1-em2c                  1D bimodal study");
            println!("examples: {}", PRESET_EXAMPLES.join(", "));
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
