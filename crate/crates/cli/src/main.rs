mod kernels;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use thiserror::Error;

use vsalient_core::metrics::{self, EvalConfig, MetricsError};
use vsalient_service::run::{execute, ControllerOverrides, RunConfig, RunError, RunSource};
use vsalient_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "vsalient", version, about = "Saliency-driven visual servoing in a simulated eye-in-hand rig")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario through the attempt protocol and write its trace and summary.
    Run(RunArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Start the session service used by the browser client.
    Serve(ServeArgs),
    /// Print spot checks of the attention and loss kernels as JSON.
    Kernels(KernelArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Bundled scenario name or path to a scenario TOML file.
    scenario: String,
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON array of clicked constraints used instead of the scenario's plan.
    #[arg(long, value_name = "FILE")]
    constraints: Option<PathBuf>,
    /// Ask for interactive constraints (only available through `serve`).
    #[arg(long, conflicts_with = "constraints")]
    interactive: bool,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Dump the first and last mask of every stage as PGM files.
    #[arg(long)]
    save_masks: bool,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    /// Per-joint step clamp (m or rad).
    #[arg(long)]
    max_step: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Pixel-error convergence threshold.
    #[arg(long)]
    converge_eps: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Directory of predicted masks (PNG or PGM).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks, paired with predictions by file stem.
    #[arg(long)]
    gt: PathBuf,
    /// Report file; printed to stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Binarization threshold for IoU.
    #[arg(long, default_value_t = metrics::DEFAULT_IOU_THRESHOLD)]
    tau: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_BETA_SQUARED)]
    beta2: f64,
    /// Number of thresholds in the F-measure sweep.
    #[arg(long, default_value_t = metrics::DEFAULT_F_THRESHOLDS)]
    thresholds: usize,
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8750")]
    addr: SocketAddr,
    /// Milliseconds between control steps of a running session.
    #[arg(long, default_value_t = 20)]
    tick_ms: u64,
}

#[derive(Debug, clap::Args)]
struct KernelArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Image tokens in the random attention check.
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    /// Joint embedding width in the random attention check.
    #[arg(long, default_value_t = 16)]
    dim: usize,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0} kernel check(s) failed")]
    KernelChecks(usize),
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let source = match (args.constraints, args.interactive) {
        (Some(path), _) => RunSource::File(path),
        (None, true) => RunSource::Interactive,
        (None, false) => RunSource::Plan,
    };
    let cfg = RunConfig {
        scenario: args.scenario,
        source,
        overrides: ControllerOverrides {
            gain: args.gain,
            damping: args.damping,
            max_step: args.max_step,
            max_iters: args.max_iters,
            max_attempts: args.max_attempts,
            converge_eps: args.converge_eps,
        },
        seed: args.seed,
        output: args.out,
        save_masks: args.save_masks,
    };
    let out = execute(&cfg)?;
    println!("scenario {} (seed {})", out.summary.scenario, out.summary.seed);
    for a in &out.summary.attempts {
        let iters: usize = a.stages.iter().map(|s| s.iterations).sum();
        let last = a.stages.last().and_then(|s| s.final_error_norm).unwrap_or(f64::NAN);
        println!("  attempt {}: {:?} after {iters} iterations, final error {last:.3}", a.attempt + 1, a.status);
    }
    println!("success rate {}%", out.summary.success_rate);
    println!("trace   {}", out.trace_path.display());
    println!("summary {}", out.summary_path.display());
    if !out.mask_paths.is_empty() {
        println!("masks   {} files", out.mask_paths.len());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.tau) || args.beta2 <= 0.0 || args.thresholds < 2 {
        return Err(CliError::Usage("need 0 <= tau <= 1, beta2 > 0 and at least 2 thresholds".into()));
    }
    let pairs = metrics::load_pairs(&args.pred, &args.gt)?;
    let cfg = EvalConfig { iou_threshold: args.tau, beta_squared: args.beta2, f_thresholds: args.thresholds };
    let report = metrics::evaluate(&pairs, &cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match args.out {
        Some(path) => {
            std::fs::write(&path, text).map_err(|source| CliError::Write { path: path.clone(), source })?;
            println!(
                "{} pairs: mIoU {:.4}  cIoU {:.4}  MAE {:.4}  maxF {:.4}",
                report.pairs.len(),
                report.miou,
                report.ciou,
                report.mae,
                report.max_f
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = ServiceConfig { tick: Duration::from_millis(args.tick_ms.max(1)), ..ServiceConfig::default() };
    let rt = tokio::runtime::Runtime::new().map_err(CliError::Serve)?;
    rt.block_on(vsalient_service::http::serve(args.addr, cfg)).map_err(CliError::Serve)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => run(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Kernels(a) => {
            let report = kernels::spot_checks(a.seed, a.tokens.max(1), a.dim.max(1));
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            match report.iter().filter(|c| !c.pass).count() {
                0 => Ok(()),
                n => Err(CliError::KernelChecks(n)),
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
