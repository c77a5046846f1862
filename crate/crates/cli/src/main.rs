//! `polynet` command line: parse, expand, rewrite, analyze, train, eval,
//! gradcheck, surgery and sweep.

mod commands;
mod support;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polynet::tensor::Precision;
use serde::Serialize;

use support::{Failure, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "polynet", version, about = "Polynomial residual modules: algebra, cost model, training and evaluation")]
#[command(args_override_self = true)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an architecture string and print its canonical form.
    Parse(ParseArgs),
    /// Print the naive polynomial form of a module.
    Expand(ExprArgs),
    /// Print the cascaded (prefix-shared) form of a module.
    Rewrite(ExprArgs),
    /// Per-module parameter, MAC and block-application counts.
    Analyze(AnalyzeArgs),
    /// Train a network on a synthetic or imported dataset.
    Train(TrainArgs),
    /// Single-crop and multi-crop evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of module gradients.
    Gradcheck(GradcheckArgs),
    /// Upgrade module kinds and/or interleave new modules into a checkpoint.
    Surgery(SurgeryArgs),
    /// Cost and accuracy table over the ablation grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for reports, checkpoints and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug, Serialize)]
pub struct ParseArgs {
    /// Preset name, `@file`, or architecture text.
    pub network: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct ExprArgs {
    /// Module token such as `poly-3`, `mpoly-2`, `3-way`.
    #[arg(long, conflicts_with = "expr")]
    pub kind: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Operator expression such as `I + F + GF`.
    #[arg(long)]
    pub expr: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long, default_value = "ir-3-6-3")]
    pub network: String,
    /// `dense:D,H` or `conv:C,R`.
    #[arg(long, default_value = "conv:16,4")]
    pub arch: String,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// naive or cascaded.
    #[arg(long, default_value = "cascaded")]
    pub lowering: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Directory of `<label>_<index>.tns` images; synthetic data otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub images: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 7)]
    pub dataset_seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "IR 1-2-1")]
    pub network: String,
    #[arg(long, default_value = "dense:8,16")]
    pub arch: String,
    #[arg(long, default_value_t = 16)]
    pub input_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Iterations between validation passes (default: a tenth of the run).
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Overrides the base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub stochastic_paths: bool,
    #[arg(long, default_value_t = 0.25)]
    pub max_prob: f64,
    /// `off`, `manual:N` or `auto:WINDOW,GAP`.
    #[arg(long, default_value = "off")]
    pub trigger: String,
    /// none, train or eval.
    #[arg(long, default_value = "none")]
    pub rescale: String,
    #[arg(long)]
    pub augment: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated side multipliers (default: those stored in the checkpoint).
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub crops: usize,
    #[arg(long, default_value_t = 0.3)]
    pub fraction: f64,
    /// train or val.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// Module kind; every kind up to order 3 when omitted.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, default_value = "dense:4,8")]
    pub arch: String,
    /// Spatial side for conv blocks.
    #[arg(long, default_value_t = 3)]
    pub spatial: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value = "cascaded")]
    pub lowering: String,
    #[arg(long, default_value_t = 1e-6)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct SurgeryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target architecture with the same stages and module counts.
    #[arg(long)]
    pub target: Option<String>,
    /// New modules per original module and stage, e.g. `1,2,1`.
    #[arg(long)]
    pub interleave: Option<String>,
    /// Zero the last layer of every new block so the function is unchanged.
    #[arg(long)]
    pub zero_last: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value = "ir-3-6-3")]
    pub network: String,
    #[arg(long, default_value = "dense:8,16")]
    pub arch: String,
    #[arg(long, default_value_t = 16)]
    pub input_size: usize,
    /// Training iterations per configuration; 0 reports costs only.
    #[arg(long, default_value_t = 200)]
    pub iters: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Only the first N grid entries.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

fn run(cli: Cli, argv: &[String]) -> Result<(), Failure> {
    match cli.command {
        Command::Parse(a) => commands::parse(&a, argv),
        Command::Expand(a) => commands::expand(&a, false, argv),
        Command::Rewrite(a) => commands::expand(&a, true, argv),
        Command::Analyze(a) => commands::analyze(&a, argv),
        Command::Train(a) => commands::train(&a, argv),
        Command::Eval(a) => commands::eval(&a, argv),
        Command::Gradcheck(a) => commands::gradcheck(&a, argv),
        Command::Surgery(a) => commands::surgery(&a, argv),
        Command::Sweep(a) => commands::sweep(&a, argv),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match support::inject_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(support::EXIT_INVALID as u8);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code as u8)
        }
    }
}
