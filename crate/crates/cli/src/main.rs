//! `sinkhorn-clt`: entropic transport solves, plug-in inference and Monte Carlo checks.
//!
//! Every command prints one JSON document with a `schema_version` field on
//! stdout. Diagnostics go to stderr. Exit codes: 0 success, 1 usage or input
//! error, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde_json::{json, Map, Value};

use sinkhorn_clt::inference::{
    cost_ci, divergence_ci, functional_ci, h0_limit_spectrum, h0_test_one_sample, h0_test_two_sample,
    potential_covariance, FunctionalSpec, SamplingDesign,
};
use sinkhorn_clt::measures::{load_matrix_csv, load_sample_points, matrix_to_csv, SampleBatch};
use sinkhorn_clt::montecarlo::{run_replications, stream_rng, SimulationConfig};
use sinkhorn_clt::operators::build_operators;
use sinkhorn_clt::sinkhorn::{sinkhorn_divergence, solve, SolverOptions, DEFAULT_MAX_ITER, DEFAULT_TOL};
use sinkhorn_clt::{DiscreteMeasure, Error, MeasureFormat};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "sinkhorn-clt", version, about = "Entropic optimal transport with limit-law inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the potentials and the coupling density.
    Solve(SolveArgs),
    /// Debiased divergence between two measures.
    Divergence(PairArgs),
    /// Point estimate and confidence interval from plug-in variances.
    Infer(InferArgs),
    /// Limit spectrum of the scaled divergence under P = Q.
    Spectrum(SpectrumArgs),
    /// Limit covariance of the potentials on the atoms.
    Covariance(CovarianceArgs),
    /// Test P = Q against the limit mixture.
    H0test(H0Args),
    /// Replicate a statistic from ground-truth measures.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SolverFlags {
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

impl SolverFlags {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Write the coupling density `ξ` as CSV.
    #[arg(long = "xi-out")]
    xi_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Entropic cost `S_ε(P_n, Q)`, one-sample only.
    Cost,
    /// `∫ η dπ` for an explicit `η` matrix.
    Functional,
    /// Transport part `∫ ½‖x − y‖² dπ`.
    Ds,
    /// `π(‖x − y‖² ≤ t)`.
    Rcol,
    /// `D_ε(P, Q)` under `P ≠ Q`.
    Divergence,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[command(flatten)]
    pair: PairArgs,
    /// Size of the sample behind `--p`.
    #[arg(long)]
    n: usize,
    /// Size of the sample behind `--q`; omit when `Q` is known.
    #[arg(long)]
    m: Option<usize>,
    /// Override `λ = m / (n + m)`.
    #[arg(long, requires = "m")]
    lambda: Option<f64>,
    /// Dense `n × m` CSV of `η(x_i, y_j)`, for `--mode functional`.
    #[arg(long)]
    eta: Option<PathBuf>,
    /// Squared-distance threshold, for `--mode rcol`.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args)]
struct CovarianceArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Two-sample weight; omit for the one-sample limit.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "cov-f-out")]
    cov_f_out: Option<PathBuf>,
    #[arg(long = "cov-g-out")]
    cov_g_out: Option<PathBuf>,
    #[arg(long = "cross-out")]
    cross_out: Option<PathBuf>,
}

#[derive(Args)]
struct H0Args {
    /// Hypothesized measure, or the first empirical measure when `--q` is given.
    #[arg(long)]
    p: PathBuf,
    /// Raw sample points (one per row) to test against `--p`.
    #[arg(long, conflicts_with_all = ["n", "q", "m"])]
    samples: Option<PathBuf>,
    /// Size behind `--p` with `--q`; alone, draws a null sample of this size from `--p`.
    #[arg(long, required_unless_present = "samples")]
    n: Option<usize>,
    /// Second empirical measure.
    #[arg(long, requires_all = ["n", "m"])]
    q: Option<PathBuf>,
    #[arg(long, requires = "q")]
    m: Option<usize>,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-replicate CSV (implies keeping replicates).
    #[arg(long = "replicates-out")]
    replicates_out: Option<PathBuf>,
    /// Force serial execution; output is identical either way.
    #[arg(long)]
    serial: bool,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Failure::Usage(msg) => json!({"kind": "usage", "message": msg}),
            Failure::Core(e) => {
                let mut body = json!({"kind": error_kind(e), "message": e.to_string()});
                if let Error::NoConvergence { iterations, residual } = e {
                    body["iterations"] = json!(iterations);
                    body["residual"] = json!(residual);
                }
                body
            }
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(msg) => msg.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::InvalidMeasure(_) => "invalid-measure",
        Error::DimensionMismatch(_) => "dimension-mismatch",
        Error::NoConvergence { .. } => "no-convergence",
        Error::NotCentered { .. } => "not-centered",
        Error::SingularSystem(_) => "singular-system",
        Error::NotSelfTransport => "not-self-transport",
        Error::NonSymmetric(_) => "non-symmetric",
        Error::EmptySample => "empty-sample",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

type Outcome = Result<Value, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load(path: &Path) -> Result<DiscreteMeasure, Error> {
    DiscreteMeasure::load(path, MeasureFormat::from_path(path))
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn cmd_solve(args: &SolveArgs) -> Outcome {
    let p = load(&args.pair.p)?;
    let q = load(&args.pair.q)?;
    let sol = solve(&p, &q, args.pair.epsilon, args.pair.solver.options())?;
    if let Some(path) = &args.xi_out {
        write_file(path, &matrix_to_csv(&sol.xi))?;
    }
    Ok(to_value(&sol.summary()))
}

fn cmd_divergence(args: &PairArgs) -> Outcome {
    let p = load(&args.p)?;
    let q = load(&args.q)?;
    let d = sinkhorn_divergence(&p, &q, args.epsilon, args.solver.options())?;
    Ok(json!({
        "divergence": d.value,
        "cost_pq": d.pq.cost,
        "cost_pp": d.pp.cost,
        "cost_qq": d.qq.cost,
        "epsilon": args.epsilon,
    }))
}

fn cmd_infer(args: &InferArgs) -> Outcome {
    let needs_t = matches!(args.mode, Mode::Rcol);
    let needs_eta = matches!(args.mode, Mode::Functional);
    match (needs_t, args.t.is_some()) {
        (true, false) => return Err(usage("--mode rcol needs --t")),
        (false, true) => return Err(usage("--t is only valid with --mode rcol")),
        _ => {}
    }
    match (needs_eta, args.eta.is_some()) {
        (true, false) => return Err(usage("--mode functional needs --eta")),
        (false, true) => return Err(usage("--eta is only valid with --mode functional")),
        _ => {}
    }
    if matches!(args.mode, Mode::Cost) && args.m.is_some() {
        return Err(usage("--mode cost has no two-sample limit; drop --m"));
    }
    let design = match (args.m, args.lambda) {
        (None, _) => SamplingDesign::one_sample(args.n)?,
        (Some(m), None) => SamplingDesign::two_sample(args.n, m)?,
        (Some(m), Some(l)) => SamplingDesign::with_lambda(args.n, m, l)?,
    };

    let p = load(&args.pair.p)?;
    let q = load(&args.pair.q)?;
    let eps = args.pair.epsilon;
    let opts = args.pair.solver.options();
    let mut warnings: Vec<String> = Vec::new();
    let (mode, report) = match args.mode {
        Mode::Cost => ("cost", cost_ci(&p, &q, eps, args.level, args.n, opts)?),
        Mode::Ds => (
            "ds",
            functional_ci(&FunctionalSpec::HalfSquaredDistance, &p, &q, eps, args.level, design, opts)?,
        ),
        Mode::Rcol => {
            let spec = FunctionalSpec::ThresholdIndicator {
                t: args.t.expect("checked"),
            };
            ("rcol", functional_ci(&spec, &p, &q, eps, args.level, design, opts)?)
        }
        Mode::Functional => {
            let h = load_matrix_csv(args.eta.as_ref().expect("checked"))?;
            let spec = FunctionalSpec::explicit(&h);
            ("functional", functional_ci(&spec, &p, &q, eps, args.level, design, opts)?)
        }
        Mode::Divergence => {
            let (report, degenerate) = divergence_ci(&p, &q, eps, args.level, design, opts)?;
            if degenerate {
                warnings.push(
                    "H1 variance is degenerate: the limit is degenerate when P = Q; use h0test instead".into(),
                );
            }
            ("divergence", report)
        }
    };
    for w in &warnings {
        warn!("{w}");
    }
    let mut out = to_value(&report);
    out["mode"] = json!(mode);
    out["warnings"] = json!(warnings);
    Ok(out)
}

fn cmd_spectrum(args: &SpectrumArgs) -> Outcome {
    let p = load(&args.p)?;
    let spectrum = h0_limit_spectrum(&p, args.epsilon, args.solver.options())?;
    let mut out = to_value(&spectrum);
    out["mean"] = json!(spectrum.mean());
    out["variance"] = json!(spectrum.variance());
    Ok(out)
}

fn cmd_covariance(args: &CovarianceArgs) -> Outcome {
    let p = load(&args.pair.p)?;
    let q = load(&args.pair.q)?;
    let sol = solve(&p, &q, args.pair.epsilon, args.pair.solver.options())?;
    let ops = build_operators(&sol, &p, &q);
    let cov = potential_covariance(&sol, &ops, &p, &q, args.lambda)?;
    for (path, m) in [
        (&args.cov_f_out, &cov.cov_f),
        (&args.cov_g_out, &cov.cov_g),
        (&args.cross_out, &cov.cross),
    ] {
        if let Some(path) = path {
            write_file(path, &matrix_to_csv(m))?;
        }
    }
    Ok(json!({
        "f": sol.f,
        "g": sol.g,
        "var_f": cov.cov_f.diagonal().as_slice(),
        "var_g": cov.cov_g.diagonal().as_slice(),
        "lambda": args.lambda,
    }))
}

fn cmd_h0test(args: &H0Args) -> Outcome {
    let p = load(&args.p)?;
    let opts = args.solver.options();
    let mut rng = stream_rng(args.seed, 0);
    let report = match (&args.samples, &args.q, args.n, args.m) {
        (Some(path), _, _, _) => {
            let points = load_sample_points(path)?;
            let n = points.len();
            let sample = DiscreteMeasure::from_samples(points)?;
            h0_test_one_sample(&p, &sample, n, args.epsilon, args.level, args.draws, opts, &mut rng)?
        }
        (None, Some(q_path), Some(n), Some(m)) => {
            let q = load(q_path)?;
            h0_test_two_sample(&p, n, &q, m, args.epsilon, args.level, args.draws, opts, &mut rng)?
        }
        (None, None, Some(n), None) => {
            let sample = SampleBatch::draw(&p, n, &mut rng)?.empirical().measure;
            let mut mixture_rng = stream_rng(args.seed, 1);
            h0_test_one_sample(&p, &sample, n, args.epsilon, args.level, args.draws, opts, &mut mixture_rng)?
        }
        _ => return Err(usage("h0test needs --samples, --n, or --n with --q and --m")),
    };
    Ok(to_value(&report))
}

fn cmd_simulate(args: &SimulateArgs) -> Outcome {
    let mut cfg = SimulationConfig::load(&args.config)?;
    if args.serial {
        cfg.parallel = false;
    }
    if args.replicates_out.is_some() {
        cfg.keep_replicates = true;
    }
    let report = run_replications(&cfg)?;
    if let Some(path) = &args.replicates_out {
        write_file(path, &report.replicates_csv().expect("replicates kept"))?;
    }
    Ok(to_value(&report))
}

fn emit(body: Value) {
    let mut doc = Map::new();
    doc.insert("schema_version".into(), json!(SCHEMA_VERSION));
    match body {
        Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("result".into(), other);
        }
    }
    println!("{}", Value::Object(doc));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            emit(json!({"error": {"kind": "usage", "message": e.kind().to_string()}}));
            return ExitCode::from(1);
        }
    };

    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Divergence(a) => cmd_divergence(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Covariance(a) => cmd_covariance(a),
        Command::H0test(a) => cmd_h0test(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match outcome {
        Ok(body) => {
            emit(body);
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            emit(json!({"error": failure.to_json()}));
            ExitCode::from(failure.exit_code())
        }
    }
}
