//! `verletflow` command-line harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use verletflow::checks::{self, CheckReport, Fault};
use verletflow::importance::{self, EstimateConfig, WeightReport};
use verletflow::io::{self, Config};
use verletflow::plot::{self, Series};
use verletflow::training;
use verletflow::{FlowError, Method, VerletFlow};

#[derive(Parser)]
#[command(name = "verletflow", version, about = "Verlet flows with exact-likelihood Taylor-Verlet integration")]
struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample work; 1 is reproducible byte for byte.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// CSV output path (stdout when omitted, except for `train`).
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// SVG output path.
    #[arg(long, global = true)]
    svg: Option<PathBuf>,
    /// Write 0 in the wall_ms column so CSVs depend on the seed alone.
    #[arg(long, global = true)]
    no_timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow and write its checkpoint and per-epoch NLL CSV.
    Train {
        config: PathBuf,
        out: PathBuf,
    },
    /// Importance-sampling estimate of log Z.
    Logz {
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        method: Option<Method>,
        /// Log-weight histogram SVG.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Log-weight histograms of several likelihood methods on the same samples.
    WeightsHist {
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "rk4-exact,rk4-hutchinson")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 60)]
        bins: usize,
    },
    /// log Z curves and wall times for several methods on identical seeds.
    Benchmark {
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "taylor-verlet,rk4-exact,rk4-hutchinson")]
        methods: Vec<Method>,
    },
    /// Forward samples with model log-densities.
    Sample {
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Property suites.
    Check {
        suite: Suite,
        /// Random draws (operators, couplings) or flows (roundtrip).
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Config supplying the target density and eval defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Couplings,
    Operators,
    Roundtrip,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    Sign,
}

enum Failure {
    Usage(String),
    Numeric(String),
    Check,
}

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.workers == 0 {
        Err(Failure::Usage("--workers must be positive".into()))
    } else {
        run(&cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Train { config, out } => train(cli, config, out),
        Command::Logz { model, eval, method, hist } => logz(cli, model, eval, *method, hist.as_deref()),
        Command::WeightsHist { model, eval, methods, bins } => weights_hist(cli, model, eval, methods, *bins),
        Command::Benchmark { model, eval, methods } => bench(cli, model, eval, methods),
        Command::Sample { model, eval, method } => sample(cli, model, eval, *method),
        Command::Check { suite, draws, inject_fault } => check(*suite, *draws, *inject_fault, cli.seed),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn emit_csv(cli: &Cli, text: &str) -> Outcome {
    match &cli.csv {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(cli: &Cli, config: &Path, out: &Path) -> Outcome {
    let mut cfg = Config::load(config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let mut flow = training::init_flow(cfg.dq, cfg.dp, cfg.order, cfg.k1_form, &cfg.train)?;
    let every = (cfg.train.epochs / 20).max(1);
    let report = training::train_with(&mut flow, &cfg.target.base, &cfg.train, |epoch, nll| {
        if epoch % every == 0 || epoch + 1 == cfg.train.epochs {
            eprintln!("epoch {:>6}  nll {nll:.4}", epoch + 1);
        }
    })?;
    io::save_checkpoint(&flow, out)?;
    let csv_path = cli.csv.clone().unwrap_or_else(|| out.with_extension("nll.csv"));
    write(&csv_path, &io::train_csv(&report))?;
    if report.skipped_batches > 0 {
        eprintln!("skipped {} singular batches", report.skipped_batches);
    }
    eprintln!("trained in {:.1} s; checkpoint {}", report.wall_time, out.display());
    report.check()?;
    Ok(())
}

/// Model, config and estimation settings shared by the evaluation commands.
struct Eval {
    flow: VerletFlow,
    cfg: Config,
    samples: usize,
    estimate: EstimateConfig,
}

fn load_eval(cli: &Cli, model: &Path, args: &EvalArgs, method: Option<Method>) -> Result<Eval, Failure> {
    let flow = io::load_checkpoint(model)?;
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.eval.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.eval.steps = steps;
    }
    if let Some(probes) = args.probes {
        cfg.eval.hutchinson_probes = probes;
    }
    if let Some(m) = method {
        cfg.eval.method = m;
    }
    if flow.dims() != (cfg.dq, cfg.dp) {
        return Err(Failure::Usage(format!(
            "checkpoint dims {:?} differ from config dims ({}, {})",
            flow.dims(),
            cfg.dq,
            cfg.dp
        )));
    }
    let estimate = cfg.eval.estimate(cli.workers);
    estimate.validate()?;
    Ok(Eval {
        flow,
        samples: args.samples.unwrap_or(cfg.eval.samples),
        cfg,
        estimate,
    })
}

fn summarize(r: &WeightReport) {
    eprintln!(
        "{:<15} logZ {:.4} ± {:.4}  valid {}  invalid {}  max log w {:.3}  {:.2} s",
        r.method.name(),
        r.log_z(),
        r.sd(),
        r.log_weights.len(),
        r.invalid_count,
        r.max_log_weight(),
        r.wall_time
    );
    if r.unreliable {
        eprintln!("warning: more than 1% of {} weights were invalid", r.method.name());
    }
}

fn curve_series(r: &WeightReport) -> Series {
    Series {
        name: r.method.name().into(),
        points: r.curve.iter().map(|c| (c.m as f64, c.log_z, c.sd)).collect(),
    }
}

fn logz(cli: &Cli, model: &Path, args: &EvalArgs, method: Option<Method>, hist: Option<&Path>) -> Outcome {
    let ev = load_eval(cli, model, args, method)?;
    let report = importance::estimate_log_z(&ev.flow, &ev.cfg.target, ev.samples, &ev.estimate)?;
    summarize(&report);
    emit_csv(cli, &io::logz_csv(std::slice::from_ref(&report), !cli.no_timings))?;
    if let Some(path) = &cli.svg {
        let svg = plot::curve_svg("log Z estimate", "samples m", "log Z", &[curve_series(&report)], Some(ev.cfg.target.log_z));
        write(path, &svg)?;
    }
    if let Some(path) = hist {
        let svg = plot::histogram_svg("log-weights", "log w", &[(report.method.name(), &report.log_weights)], 60);
        write(path, &svg)?;
    }
    Ok(())
}

fn weights_hist(cli: &Cli, model: &Path, args: &EvalArgs, methods: &[Method], bins: usize) -> Outcome {
    if methods.is_empty() || bins == 0 {
        return Err(Failure::Usage("need at least one method and one bin".into()));
    }
    let ev = load_eval(cli, model, args, None)?;
    let mut reports: Vec<WeightReport> = Vec::new();
    for &m in methods {
        if reports.iter().any(|r| r.method == m) {
            eprintln!("warning: duplicate method {m} ignored");
            continue;
        }
        let r = importance::estimate_log_z(&ev.flow, &ev.cfg.target, ev.samples, &ev.estimate.with_method(m))?;
        summarize(&r);
        reports.push(r);
    }
    emit_csv(cli, &io::weights_csv(&reports))?;
    if let Some(path) = &cli.svg {
        let data: Vec<(&str, &[f64])> = reports.iter().map(|r| (r.method.name(), r.log_weights.as_slice())).collect();
        write(path, &plot::histogram_svg("log-weights", "log w", &data, bins))?;
    }
    Ok(())
}

fn bench(cli: &Cli, model: &Path, args: &EvalArgs, methods: &[Method]) -> Outcome {
    let ev = load_eval(cli, model, args, None)?;
    let result = importance::benchmark(&ev.flow, &ev.cfg.target, ev.samples, methods, &ev.estimate)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for r in &result.reports {
        summarize(r);
    }
    emit_csv(cli, &io::logz_csv(&result.reports, !cli.no_timings))?;
    if let Some(path) = &cli.svg {
        let series: Vec<Series> = result.reports.iter().map(curve_series).collect();
        let svg = plot::curve_svg("log Z estimate", "samples m", "log Z", &series, Some(ev.cfg.target.log_z));
        write(path, &svg)?;
    }
    Ok(())
}

fn sample(cli: &Cli, model: &Path, args: &EvalArgs, method: Option<Method>) -> Outcome {
    let ev = load_eval(cli, model, args, method)?;
    let n = args.samples.unwrap_or(1000);
    let (q, p, logp) = importance::sample_model(&ev.flow, n, &ev.estimate)?;
    emit_csv(cli, &io::samples_csv(&q, &p, &logp))
}

fn check(suite: Suite, draws: Option<usize>, fault: Option<InjectedFault>, seed: Option<u64>) -> Outcome {
    let seed = seed.unwrap_or(0);
    let fault = match fault {
        Some(InjectedFault::Sign) => Fault::FlipLogDetSign,
        None => Fault::None,
    };
    let report: CheckReport = match suite {
        Suite::Operators => checks::operators_suite(draws.unwrap_or(1000), seed, fault),
        Suite::Couplings => checks::couplings_suite(draws.unwrap_or(1000), seed),
        Suite::Roundtrip => checks::roundtrip_suite(draws.unwrap_or(20), seed),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    eprintln!(
        "{}: {} cases, max error {:.3e}, {} failures",
        report.suite,
        report.cases,
        report.max_error,
        report.failures.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}
