use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stochinv::bench::{self, BenchmarkSpec, ConvergenceTrace, InitPolicy, MatrixSource, MethodSpec};
use stochinv::{
    io, method_rate, run_inverter, Error, Init, InverterConfig, Method, ProbabilityRule, ProblemMatrix,
    Termination, WeightSpec,
};

/// Rate computations are O(n³) dense eigenproblems; beyond this size they
/// need --force.
const RATE_SIZE_LIMIT: usize = 5000;

#[derive(Parser)]
#[command(
    name = "stochinv",
    version,
    about = "Stochastic sketch-and-project matrix inversion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic SPD matrix ĀᵀĀ with uniform Ā to a Matrix Market file.
    Gen(GenArgs),
    /// Compute the convergence rate of a method with a fixed discrete sketch.
    Rate(RateArgs),
    /// Run one method and report how far it got.
    Invert(InvertArgs),
    /// Run several methods on one matrix and emit CSV and SVG traces.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, env = "STOCHINV_SEED", default_value_t = 0)]
    seed: u64,
    /// Output Matrix Market file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SketchArgs {
    /// Sketch width (defaults to ⌈√n⌉, or 1 for good-broyden).
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, value_enum)]
    probabilities: Option<Probabilities>,
    /// Weight for the generic row, col and sym methods.
    #[arg(long, value_enum)]
    weight: Option<Weight>,
}

#[derive(Args)]
struct RateArgs {
    /// `path.mtx`, `libsvm:path[:lambda]`, `synthetic:n[:seed]` or `identity:n`.
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    method: Method,
    #[command(flatten)]
    sketch: SketchArgs,
    /// Target accuracy for the iteration-count estimate.
    #[arg(long, default_value_t = 1e-2)]
    tol: f64,
    /// Allow rate computation for n > 5000.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = stochinv::driver::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, env = "STOCHINV_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Paper)]
    init: InitArg,
    /// Stop each run after this many seconds of step time.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Evaluate the residual every this many iterations.
    #[arg(long, default_value_t = stochinv::driver::DEFAULT_RESIDUAL_EVERY)]
    residual_every: usize,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    method: Method,
    #[command(flatten)]
    sketch: SketchArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Write the final iterate to a Matrix Market file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    matrix: String,
    /// Repeat to compare several methods.
    #[arg(long, required = true)]
    method: Vec<Method>,
    #[command(flatten)]
    sketch: SketchArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    /// Record zero seconds everywhere so the CSV is byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Probabilities {
    Uniform,
    Convenient,
    Optimized,
    Heuristic,
}

impl From<Probabilities> for ProbabilityRule {
    fn from(p: Probabilities) -> Self {
        match p {
            Probabilities::Uniform => ProbabilityRule::Uniform,
            Probabilities::Convenient => ProbabilityRule::Convenient,
            Probabilities::Optimized => ProbabilityRule::OptimizedExact,
            Probabilities::Heuristic => ProbabilityRule::OptimizedHeuristic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Weight {
    Identity,
    InvA,
    A2,
    GramLeft,
    GramRight,
}

impl From<Weight> for WeightSpec {
    fn from(w: Weight) -> Self {
        match w {
            Weight::Identity => WeightSpec::Identity,
            Weight::InvA => WeightSpec::InverseOfA,
            Weight::A2 => WeightSpec::ASquared,
            Weight::GramLeft => WeightSpec::GramInverseLeft,
            Weight::GramRight => WeightSpec::GramInverseRight,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Paper,
    Identity,
}

fn parse_source(s: &str) -> anyhow::Result<MatrixSource> {
    let config = |msg: String| Error::Config(msg);
    if let Some(rest) = s.strip_prefix("synthetic:") {
        let (n, seed) = match rest.split_once(':') {
            Some((n, seed)) => (n, seed.parse().map_err(|_| config(format!("bad seed in `{s}`")))?),
            None => (rest, 0),
        };
        let n = n.parse().map_err(|_| config(format!("bad size in `{s}`")))?;
        return Ok(MatrixSource::Synthetic { n, seed });
    }
    if let Some(rest) = s.strip_prefix("identity:") {
        let n = rest.parse().map_err(|_| config(format!("bad size in `{s}`")))?;
        return Ok(MatrixSource::Identity(n));
    }
    if let Some(rest) = s.strip_prefix("libsvm:") {
        // A trailing `:number` is the ridge parameter; paths may contain colons.
        let (path, lambda) = match rest.rsplit_once(':') {
            Some((path, lambda)) if lambda.parse::<f64>().is_ok() => (path, lambda.parse().unwrap()),
            _ => (rest, 1.0),
        };
        if path.is_empty() {
            return Err(config(format!("missing path in `{s}`")).into());
        }
        return Ok(MatrixSource::Libsvm {
            path: path.into(),
            lambda,
        });
    }
    Ok(MatrixSource::MatrixMarket(s.into()))
}

fn load(source: &MatrixSource) -> anyhow::Result<ProblemMatrix> {
    let a = source
        .load()
        .with_context(|| format!("loading {}", describe(source)))?;
    let density = io::density(a.data());
    if density < 0.01 {
        eprintln!(
            "warning: matrix is {:.3}% nonzero; it is stored and processed densely",
            100.0 * density
        );
    }
    Ok(a)
}

fn describe(source: &MatrixSource) -> String {
    match source {
        MatrixSource::MatrixMarket(p) => p.display().to_string(),
        MatrixSource::Libsvm { path, lambda } => {
            format!("ridge Hessian of {} (lambda {lambda})", path.display())
        }
        MatrixSource::Synthetic { n, seed } => format!("synthetic({n}, seed {seed})"),
        MatrixSource::Identity(n) => format!("identity({n})"),
    }
}

fn method_spec(method: Method, sketch: &SketchArgs) -> MethodSpec {
    let mut spec = MethodSpec::new(method);
    spec.q = sketch.q;
    spec.probabilities = sketch.probabilities.map(Into::into);
    // Named updates fix their own weight; only pass it where it is free.
    if method.is_sketched() && method.implied_weight().is_none() {
        spec.weight = sketch.weight.map(Into::into);
    }
    spec
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let a = io::gen_synthetic(args.n, args.seed)?;
    io::write_matrix_market(&args.out, a.data(), true)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {}x{} synthetic matrix to {}",
        args.n,
        args.n,
        args.out.display()
    );
    Ok(())
}

fn rate(args: RateArgs) -> anyhow::Result<()> {
    let source = parse_source(&args.matrix)?;
    let a = load(&source)?;
    if a.n() > RATE_SIZE_LIMIT && !args.force {
        bail!(Error::Config(format!(
            "rate computation is O(n^3) dense work; n = {} exceeds {RATE_SIZE_LIMIT}, pass --force to run it anyway",
            a.n()
        )));
    }
    let mut config = InverterConfig::new(args.method);
    config.q = args.sketch.q;
    config.probabilities = args.sketch.probabilities.map(Into::into);
    config.weight = args.sketch.weight.map(Into::into);
    let report = method_rate(&a, &config)?;
    let lambda_min = 1.0 - report.rho;
    println!("method       {}", args.method);
    println!("n            {}", a.n());
    println!("rho          {:.12}", report.rho);
    println!("lambda_min   {lambda_min:.6e}");
    println!("lower bound  {:.12}", report.lower_bound);
    if let Some(kappa) = report.kappa_2f {
        println!("kappa_2,F    {kappa:.6e}");
    }
    if let Some(gamma) = report.gamma_bound {
        println!("gamma bound  {gamma:.12}");
    }
    println!(
        "iterations   {:.1} to reach {:e}",
        report.iterations_for(args.tol),
        args.tol
    );
    Ok(())
}

fn inverter_config(method: Method, sketch: &SketchArgs, run: &RunArgs) -> InverterConfig {
    let spec = method_spec(method, sketch);
    let mut config = InverterConfig::new(method);
    config.q = spec.q;
    config.probabilities = spec.probabilities;
    config.weight = sketch.weight.map(Into::into);
    config.tol = run.tol;
    config.max_iters = run.max_iters;
    config.seed = run.seed;
    config.time_budget = run.time_budget;
    config.residual_every = run.residual_every;
    config.init = match run.init {
        InitArg::Paper => Init::Paper,
        InitArg::Identity => Init::Identity,
    };
    config
}

fn invert(args: InvertArgs) -> anyhow::Result<ExitCode> {
    let source = parse_source(&args.matrix)?;
    let a = load(&source)?;
    let config = inverter_config(args.method, &args.sketch, &args.run);
    let run = run_inverter(&a, &config)?;
    let last = run
        .state
        .history
        .last()
        .expect("history starts with the initial point");
    println!("method       {}", args.method);
    println!("status       {}", run.termination.label());
    if let Termination::Failed(reason) = &run.termination {
        println!("reason       {reason}");
    }
    println!("iterations   {}", run.state.k);
    println!("residual     {:.6e}", last.residual);
    println!("flops        {}", last.flops);
    println!("seconds      {:.3}", last.seconds);
    if let Some(path) = &args.out {
        io::write_matrix_market(path, &run.state.x, config.method.symmetric_iterate())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.run.out_csv {
        let trace = ConvergenceTrace {
            label: args.method.name().to_string(),
            method: args.method,
            trial: 0,
            points: run.state.history.clone(),
            status: run.termination.clone(),
        };
        let mut out = create(path)?;
        bench::write_csv(&mut out, &[trace])?;
        out.flush().map_err(Error::Io)?;
    }
    Ok(match run.termination {
        Termination::Diverged | Termination::Failed(_) => ExitCode::from(3),
        _ => ExitCode::SUCCESS,
    })
}

fn run_bench(args: BenchArgs) -> anyhow::Result<ExitCode> {
    let source = parse_source(&args.matrix)?;
    let methods = args
        .method
        .iter()
        .map(|&m| method_spec(m, &args.sketch))
        .collect();
    let mut spec = BenchmarkSpec::new(source, methods);
    spec.tol = args.run.tol;
    spec.max_iters = args.run.max_iters;
    spec.time_budget = args.run.time_budget;
    spec.seed = args.run.seed;
    spec.trials = args.trials;
    spec.residual_every = args.run.residual_every;
    spec.record_time = !args.no_timing;
    spec.init = match args.run.init {
        InitArg::Paper => InitPolicy::Paper,
        InitArg::Identity => InitPolicy::Identity,
    };
    spec.validate()?;
    let a = load(&spec.source)?;
    let traces = bench::run_benchmark(&spec, &a)?;

    println!(
        "{:<22} {:<11} {:>7} {:>12} {:>12} {:>9}",
        "method", "status", "iters", "residual", "flops", "seconds"
    );
    for t in &traces {
        let last = t.points.last().expect("traces start with the initial point");
        println!(
            "{:<22} {:<11} {:>7} {:>12.4e} {:>12.4e} {:>9.3}",
            t.label,
            t.status.label(),
            t.iterations(),
            last.residual,
            last.flops as f64,
            last.seconds
        );
        if let Termination::Failed(reason) = &t.status {
            eprintln!("{}: {reason}", t.label);
        }
    }

    if let Some(path) = &args.run.out_csv {
        let mut out = create(path)?;
        bench::write_csv(&mut out, &traces)?;
        out.flush().map_err(Error::Io)?;
    }
    if let Some(path) = &args.out_svg {
        let mut out = create(path)?;
        bench::write_svg(&mut out, &traces)?;
        out.flush().map_err(Error::Io)?;
    }
    let all_failed = traces
        .iter()
        .all(|t| matches!(t.status, Termination::Diverged | Termination::Failed(_)));
    Ok(if all_failed {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

/// 2 for configuration problems, 3 for numerical failures, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Parse { .. } => 4,
                Error::Config(_)
                | Error::Dimension(_)
                | Error::NotSymmetric
                | Error::NotSpd
                | Error::WeightNotSpd
                | Error::IncompleteSampling { .. }
                | Error::NotSquareSampling => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => gen(args).map(|()| ExitCode::SUCCESS),
        Command::Rate(args) => rate(args).map(|()| ExitCode::SUCCESS),
        Command::Invert(args) => invert(args),
        Command::Bench(args) => run_bench(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
