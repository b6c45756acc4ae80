//! Command-line front end: fitting, prediction, scoring, convergence traces,
//! marginal-likelihood surfaces and fixture generation.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use robustgp::data::{self, Dataset, Fixture, FixtureSpec, FIXTURE_SEED, WATCHED_SITES};
use robustgp::ep::{run_schedule, EpConfig, EpError, EpProblem, EpRun, Schedule};
use robustgp::kernels::KernelParams;
use robustgp::likelihood::StudentTParams;
use robustgp::model::{self, FitConfig, FittedModel, Inference, NuMode};

const SURFACE_SCHEMA: &str = "log_lengthscale2,log_magnitude,log_zep,method,converged,eta,error";
const PREDICT_SCHEMA: &str = "mean,var";

#[derive(Parser)]
#[command(name = "robustgp", version, about = "GP regression with a Student-t likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit hyperparameters and write the model as JSON.
    Fit(FitArgs),
    /// Predictive mean and variance (and log density when targets are given).
    Predict(PredictArgs),
    /// MAE and mean log predictive density on labelled data.
    Score(ScoreArgs),
    /// Convergence trace of one EP schedule on a fixture.
    Trace(TraceArgs),
    /// log Z_EP over a lengthscale x magnitude grid.
    Surface(SurfaceArgs),
    /// Write a fixture as CSV.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Ep,
    Laplace,
    Gaussian,
}

#[derive(Clone, Copy, PartialEq, Debug)]
struct NuArg(NuMode);

impl FromStr for NuArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "opt" => Ok(NuArg(NuMode::Optimized)),
            "grid" => Ok(NuArg(NuMode::Grid)),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("expected fixed:V, opt or grid, got {s:?}"))?;
                let v: f64 = v.parse().map_err(|_| format!("bad value in {s:?}"))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(format!("nu must be positive, got {v}"));
                }
                Ok(NuArg(NuMode::Fixed(v)))
            }
        }
    }
}

#[derive(Args)]
struct EpArgs {
    /// Fraction of each likelihood term in the tilted distributions.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Initial damping factor.
    #[arg(long)]
    delta: Option<f64>,
    /// Parallel sweeps before the double loop.
    #[arg(long = "parallel-init", default_value_t = 10)]
    parallel_init: usize,
    /// Limit on trace rows (sweeps plus double-loop iterations).
    #[arg(long)]
    sweeps: Option<usize>,
}

impl EpArgs {
    fn config(&self, default_delta: f64, default_sweeps: usize) -> EpConfig {
        EpConfig {
            eta: self.eta,
            delta_init: self.delta.unwrap_or(default_delta),
            n_parallel_init: self.parallel_init,
            max_sweeps: self.sweeps.unwrap_or(default_sweeps),
            ..EpConfig::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// fixed:V, opt or grid
    #[arg(long, default_value = "fixed:4")]
    nu: NuArg,
    #[arg(long, value_enum, default_value = "ep")]
    method: FitMethod,
    #[command(flatten)]
    ep: EpArgs,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit on the raw scale.
    #[arg(long)]
    no_standardize: bool,
    /// Model JSON destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Column with observed targets; adds a log_density column.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
}

/// Fixture name: example1, example2, outlier:D or friedman:N:K.
#[derive(Clone, Debug, PartialEq)]
struct FixtureArg(Fixture);

impl FromStr for FixtureArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| format!("bad number {t:?} in {s:?}"));
        let count = |t: &str| t.parse::<usize>().map_err(|_| format!("bad count {t:?} in {s:?}"));
        match parts.as_slice() {
            ["example1"] => Ok(FixtureArg(Fixture::Example1)),
            ["example2"] => Ok(FixtureArg(Fixture::Example2)),
            ["outlier", d] => Ok(FixtureArg(Fixture::OutlierDistance(num(d)?))),
            ["friedman", n, k] => Ok(FixtureArg(Fixture::Friedman {
                n_train: count(n)?,
                n_outliers: count(k)?,
            })),
            _ => Err(format!("unknown fixture {s:?}; expected example1, example2, outlier:D or friedman:N:K")),
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Debug)]
enum TraceMethod {
    Sequential,
    Parallel,
    DoubleLoop,
    Fractional,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value = "fixed:2")]
    nu: NuArg,
    /// Noise scale σ (not squared).
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Magnitude σ_se (not squared).
    #[arg(long, default_value_t = 3.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0.88)]
    lengthscale: f64,
}

impl HyperArgs {
    fn lik(&self) -> Result<StudentTParams, String> {
        let NuMode::Fixed(nu) = self.nu.0 else {
            return Err("traces and surfaces need --nu fixed:V".to_string());
        };
        StudentTParams::new(nu, self.sigma * self.sigma).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, default_value = "example2")]
    fixture: FixtureArg,
    #[arg(long, value_enum)]
    method: TraceMethod,
    /// Fraction of each likelihood term (fractional defaults to 0.5).
    #[arg(long)]
    eta: Option<f64>,
    /// Damping (fractional defaults to 1, the others to 0.8).
    #[arg(long)]
    delta: Option<f64>,
    /// Parallel sweeps before the double loop.
    #[arg(long = "parallel-init", default_value_t = 0)]
    parallel_init: usize,
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `lo:hi:n`, evenly spaced and inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Range {
    lo: f64,
    hi: f64,
    n: usize,
}

impl Range {
    fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        (0..self.n)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.n - 1) as f64)
            .collect()
    }
}

impl FromStr for Range {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected lo:hi:n, got {s:?}"));
        }
        let lo = parts[0].parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
        let hi = parts[1].parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
        let n: usize = parts[2].parse().map_err(|_| format!("bad count in {s:?}"))?;
        if n == 0 {
            return Err("grid needs at least one point".to_string());
        }
        Ok(Range { lo, hi, n })
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Debug)]
enum SurfaceMethod {
    Robust,
    Sequential,
    Parallel,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long, default_value = "example2")]
    fixture: FixtureArg,
    /// Grid over log l², as lo:hi:n.
    #[arg(long = "log-lengthscale2", default_value = "-2:2:9", allow_hyphen_values = true)]
    log_lengthscale2: Range,
    /// Grid over log σ_se², as lo:hi:n.
    #[arg(long = "log-magnitude", default_value = "-1:4:9", allow_hyphen_values = true)]
    log_magnitude: Range,
    #[arg(long, value_enum, default_value = "robust")]
    method: SurfaceMethod,
    #[command(flatten)]
    ep: EpArgs,
    #[arg(long, default_value = "fixed:2")]
    nu: NuArg,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    fixture: FixtureArg,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    seed: u64,
    /// Clean Friedman test points from the seed's second stream instead.
    #[arg(long)]
    test_points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
#[derive(Debug)]
enum CliError {
    /// Output was written but a run did not converge.
    NotConverged(String),
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::NotConverged(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::NotConverged(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Buffered file or stdout.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match out {
        Some(p) => {
            let f = File::create(p).map_err(|e| io_err(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn read_model(path: &Path) -> Result<FittedModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    FittedModel::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn dataset(path: &Path, target: &str) -> Result<Dataset, CliError> {
    data::load_csv(path, target).map_err(|e| match e {
        data::DataError::Io { .. } => usage(e),
        other => usage(format!("{}: {other}", path.display())),
    })
}

fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let ds = dataset(&a.input, &a.target)?;
    let config = FitConfig {
        inference: match a.method {
            FitMethod::Ep => Inference::Ep,
            FitMethod::Laplace => Inference::Laplace,
            FitMethod::Gaussian => Inference::Gaussian,
        },
        nu_mode: a.nu.0,
        ep: a.ep.config(EpConfig::default().delta_init, EpConfig::default().max_sweeps),
        restarts: a.restarts,
        seed: a.seed,
        standardize: !a.no_standardize,
        ..FitConfig::default()
    };
    let m = model::fit(&ds, &config).map_err(usage)?;
    let json = m.to_json().map_err(usage)?;
    std::fs::write(&a.out, json).map_err(|e| io_err(&a.out, e))?;

    let mut out = io::stdout().lock();
    let h = &m.hyper;
    let p = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(usage);
    p(&mut out, format!("log_evidence {}", m.log_evidence))?;
    p(&mut out, format!("magnitude2 {}", h.kernel.magnitude()))?;
    for k in 0..h.kernel.log_lengthscales.len() {
        p(&mut out, format!("lengthscale{} {}", k + 1, h.kernel.lengthscale(k)))?;
    }
    p(&mut out, format!("sigma2 {}", h.lik.sigma2()))?;
    if m.inference != Inference::Gaussian {
        p(&mut out, format!("nu {}", h.lik.nu()))?;
    }
    let r = &m.report;
    p(
        &mut out,
        format!(
            "iterations {} evaluations {} restarts {} optimizer_converged {}",
            r.iterations, r.evaluations, r.restarts, r.converged
        ),
    )?;
    if m.components.len() > 1 {
        for (j, c) in m.components.iter().enumerate() {
            p(
                &mut out,
                format!("leg {} nu {} weight {} log_evidence {}", j + 1, c.hyper.lik.nu(), c.weight, c.log_evidence),
            )?;
        }
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let m = read_model(&a.model)?;
    let (x, y) = match &a.target {
        Some(t) => {
            let ds = dataset(&a.input, t)?;
            (ds.x, Some(ds.y))
        }
        None => {
            let (_, x) = data::load_inputs(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
            (x, None)
        }
    };
    let lat = m.predict_latent(&x).map_err(usage)?;
    let dens = match &y {
        Some(y) => Some(m.predict_log_density(&x, y).map_err(usage)?),
        None => None,
    };
    let mut w = sink(a.out.as_deref())?;
    let header = if dens.is_some() {
        format!("{PREDICT_SCHEMA},log_density")
    } else {
        PREDICT_SCHEMA.to_string()
    };
    writeln!(w, "{header}").map_err(usage)?;
    for (i, (mean, var)) in lat.iter().enumerate() {
        match &dens {
            Some(d) => writeln!(w, "{mean},{var},{}", d[i]),
            None => writeln!(w, "{mean},{var}"),
        }
        .map_err(usage)?;
    }
    w.flush().map_err(usage)
}

fn cmd_score(a: &ScoreArgs) -> Result<(), CliError> {
    let m = read_model(&a.model)?;
    let ds = dataset(&a.input, &a.target)?;
    let s = model::score(&m, &ds).map_err(usage)?;
    println!("mae {}", s.mae);
    println!("mlpd {}", s.mlpd);
    Ok(())
}

fn fixture(f: &FixtureArg, seed: u64) -> Result<Dataset, CliError> {
    data::make_fixture(&FixtureSpec { which: f.0.clone(), seed }).map_err(usage)
}

fn finish_run(result: Result<EpRun, EpError>) -> Result<(EpRun, bool), CliError> {
    match result {
        Ok(r) => Ok((r, true)),
        Err(EpError::NotConverged(r)) => Ok((*r, false)),
        Err(e) => Err(usage(e)),
    }
}

fn cmd_trace(a: &TraceArgs) -> Result<(), CliError> {
    let ds = fixture(&a.fixture, a.seed)?;
    let lik = a.hyper.lik().map_err(usage)?;
    let kernel = KernelParams::isotropic(a.hyper.magnitude * a.hyper.magnitude, a.hyper.lengthscale, ds.dim());
    let problem = EpProblem::new(ds.x, ds.y, kernel, lik).map_err(usage)?;
    let fractional = a.method == TraceMethod::Fractional;
    let config = EpConfig {
        eta: a.eta.unwrap_or(if fractional { 0.5 } else { 1.0 }),
        delta_init: a.delta.unwrap_or(if fractional { 1.0 } else { 0.8 }),
        n_parallel_init: a.parallel_init,
        max_sweeps: a.sweeps,
        watched: WATCHED_SITES.to_vec(),
        ..EpConfig::default()
    };
    let schedule = match a.method {
        TraceMethod::Sequential => Schedule::Sequential(Vec::new()),
        TraceMethod::Parallel | TraceMethod::Fractional => Schedule::Parallel,
        TraceMethod::DoubleLoop => Schedule::Robust,
    };
    let (run, converged) = finish_run(run_schedule(&problem, &config, &schedule, None))?;
    let mut w = sink(a.out.as_deref())?;
    run.trace.write_csv(&mut w).map_err(usage)?;
    w.flush().map_err(usage)?;
    eprintln!(
        "converged {converged} rows {} outer_iterations {} undefined_rows {} residual {:e} log_zep {}",
        run.trace.records.len(),
        run.outer_iterations,
        run.trace.records.iter().filter(|r| r.neg_log_zep.is_nan()).count(),
        run.residual,
        run.log_zep
    );
    if converged {
        Ok(())
    } else {
        Err(CliError::NotConverged("did not converge; trace written".to_string()))
    }
}

struct SurfaceRow {
    log_zep: f64,
    method: &'static str,
    converged: bool,
    eta: f64,
    error: String,
}

fn cmd_surface(a: &SurfaceArgs) -> Result<(), CliError> {
    let ds = fixture(&a.fixture, a.seed)?;
    let NuMode::Fixed(nu) = a.nu.0 else {
        return Err(usage("surfaces need --nu fixed:V"));
    };
    let lik = StudentTParams::new(nu, a.sigma * a.sigma).map_err(usage)?;
    let config = a.ep.config(EpConfig::default().delta_init, EpConfig::default().max_sweeps);
    config.validate().map_err(usage)?;
    let points: Vec<(f64, f64)> = a
        .log_lengthscale2
        .values()
        .into_iter()
        .flat_map(|l| a.log_magnitude.values().into_iter().map(move |m| (l, m)))
        .collect();
    let schedule = match a.method {
        SurfaceMethod::Robust => Schedule::Robust,
        SurfaceMethod::Sequential => Schedule::Sequential(Vec::new()),
        SurfaceMethod::Parallel => Schedule::Parallel,
    };
    let rows: Vec<SurfaceRow> = points
        .par_iter()
        .map(|&(l, m)| {
            let kernel = KernelParams {
                log_magnitude: m,
                log_lengthscales: vec![l; ds.dim()],
            };
            let run = EpProblem::new(ds.x.clone(), ds.y.clone(), kernel, lik.clone())
                .and_then(|p| run_schedule(&p, &config, &schedule, None));
            let method = |r: &EpRun| match schedule {
                Schedule::Sequential(_) => "sequential",
                _ if r.double_loop => "double-loop",
                _ => "parallel",
            };
            match run {
                Ok(r) => SurfaceRow {
                    log_zep: r.log_zep,
                    method: method(&r),
                    converged: true,
                    eta: r.eta,
                    error: String::new(),
                },
                Err(EpError::NotConverged(r)) => SurfaceRow {
                    log_zep: f64::NAN,
                    method: method(&r),
                    converged: false,
                    eta: r.eta,
                    error: "not converged".to_string(),
                },
                Err(e) => SurfaceRow {
                    log_zep: f64::NAN,
                    method: "none",
                    converged: false,
                    eta: config.eta,
                    error: e.to_string().replace(',', ";"),
                },
            }
        })
        .collect();
    let mut w = sink(a.out.as_deref())?;
    writeln!(w, "{SURFACE_SCHEMA}").map_err(usage)?;
    for ((l, m), r) in points.iter().zip(&rows) {
        let z = if r.log_zep.is_nan() { "NaN".to_string() } else { r.log_zep.to_string() };
        writeln!(w, "{l},{m},{z},{},{},{},{}", r.method, r.converged, r.eta, r.error).map_err(usage)?;
    }
    w.flush().map_err(usage)
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let ds = match (a.test_points, &a.fixture.0) {
        (Some(n), Fixture::Friedman { .. }) => data::friedman_test(a.seed, n, true),
        (Some(_), _) => return Err(usage("--test-points needs a friedman fixture")),
        (None, _) => fixture(&a.fixture, a.seed)?,
    };
    let mut w = sink(a.out.as_deref())?;
    data::write_csv(&ds, &mut w).map_err(usage)?;
    w.flush().map_err(usage)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Score(a) => cmd_score(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Surface(a) => cmd_surface(a),
        Command::Gen(a) => cmd_gen(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("ROBUSTGP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Fails only if a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ROBUSTGP_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
