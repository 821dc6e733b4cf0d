//! `lognet`: calibration, analysis, training and inference for
//! log-quantized networks.

mod cmd;
mod error;
mod eval;
mod io;
mod parse;
mod runconfig;

use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lognet::lognum::AccumMode;
use lognet::nn::Mode;

use crate::error::{CliError, CliResult};

/// Environment variable capping the worker thread count.
const THREADS_VAR: &str = "LOGNET_THREADS";

#[derive(Parser)]
#[command(name = "lognet", version, about = "Logarithmic quantization of neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose per-layer activation FSRs that minimize the L1 quantization error.
    Calibrate(cmd::calibrate::CalibrateArgs),
    /// Accuracy over a grid of bitwidths and FSRs.
    Sweep(cmd::sweep::SweepArgs),
    /// Train a model from a key = value configuration file.
    Train(cmd::train::TrainArgs),
    /// Predict classes and report wall-clock time per mode.
    Infer(cmd::infer::InferArgs),
    /// Histograms of activation quantization errors.
    QuantAnalyze(cmd::analyze::AnalyzeArgs),
    /// Store weights as packed log codes.
    Pack(cmd::pack::PackArgs),
    /// Write a synthetic dataset as IDX files.
    GenData(cmd::gen_data::GenDataArgs),
}

/// Arithmetic selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Float32,
    Method1,
    #[value(name = "method2_base2")]
    Method2Base2,
    #[value(name = "method2_sqrt2")]
    Method2Sqrt2,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Float32 => Mode::Float32,
            ModeArg::Method1 => Mode::Method1,
            ModeArg::Method2Base2 => Mode::Method2Base2,
            ModeArg::Method2Sqrt2 => Mode::Method2Sqrt2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccumArg {
    Linear,
    Log,
}

impl From<AccumArg> for AccumMode {
    fn from(a: AccumArg) -> Self {
        match a {
            AccumArg::Linear => AccumMode::Linear,
            AccumArg::Log => AccumMode::Log,
        }
    }
}

/// Image file with optional labels.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// IDX file of input samples.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX file of class labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

/// Candidate FSRs as `a:b`.
pub fn fsr_range_arg(s: &str) -> Result<RangeInclusive<i32>, String> {
    parse::fsr_range(s)
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Calibrate(a) => cmd::calibrate::run(a),
        Command::Sweep(a) => cmd::sweep::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Infer(a) => cmd::infer::run(a),
        Command::QuantAnalyze(a) => cmd::analyze::run(a),
        Command::Pack(a) => cmd::pack::run(a),
        Command::GenData(a) => cmd::gen_data::run(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
