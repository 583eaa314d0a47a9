//! `fanet`: dataset generation, training, evaluation, ablation, gradient
//! checks, classical enhancement and FRM feature dumps.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime or numerical
//! failure. `FANET_THREADS` sets the worker count (default 1).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "fanet", version, about = "Desk-scale FANet toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test synthetic scenes and a manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate the six token-mixer configurations over several seeds.
    Ablate(AblateArgs),
    /// Compare autodiff gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Apply Laplacian sharpening and sigmoid contrast enhancement to a PPM.
    Enhance(EnhanceArgs),
    /// Write heat maps of the first FRM of a stage.
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.max_iters`.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides `train.base_lr`.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_scm: bool,
    #[arg(long)]
    no_frm_high: bool,
    #[arg(long)]
    no_frm_low: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// JSON report path; defaults to `metrics_<split>.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for predicted masks (`pred_XXXX.pgm`).
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Subset of baseline,scm,frm-high,frm-low,frm-both,full.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Block,
    Model,
}

impl ScopeArg {
    fn as_str(self) -> &'static str {
        match self {
            ScopeArg::Ops => "ops",
            ScopeArg::Block => "block",
            ScopeArg::Model => "model",
        }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    scope: ScopeArg,
}

#[derive(Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    stage: usize,
    #[arg(long)]
    out: PathBuf,
    /// Replace the FRM smoothing filter with a 2x2 box average first.
    #[arg(long)]
    box_filter: bool,
}

fn init_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("FANET_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                fanet::Error::Validation(format!(
                    "FANET_THREADS must be a positive integer, got `{v}`"
                ))
            })?,
        Err(_) => 1,
    };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fanet::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData(a) => commands::gen_data(a)?,
        Command::Train(a) => commands::train_cmd(a)?,
        Command::Eval(a) => commands::eval_cmd(a)?,
        Command::Ablate(a) => commands::ablate(a)?,
        Command::Gradcheck(a) => {
            if !commands::gradcheck(a)? {
                eprintln!("error: gradient check exceeded tolerance");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Enhance(a) => commands::enhance(a)?,
        Command::DumpFeatures(a) => commands::dump_features(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| run(cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
