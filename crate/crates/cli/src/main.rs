use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use gradax::compressors::{CompressorConfig, CompressorKind};
use gradax::overlap::{BufferPolicy, ScheduleMode, MB};

mod analysis;
mod bench;
mod output;
mod train;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::Transport(_) => 3,
        }
    }
}

pub fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "gradax",
    version,
    about = "Data-parallel training with compressed gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an MLP with simulated or loopback-TCP workers.
    Train(train::TrainArgs),
    /// Time collectives over a message size grid.
    Bench(bench::BenchArgs),
    /// Predict one iteration with the cost model.
    Predict(analysis::PredictArgs),
    /// Predict over a grid of one parameter.
    Sweep(analysis::SweepArgs),
    /// Tensor-size distribution of a model and its low-rank factors.
    Stats(analysis::StatsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ssgd,
    Sign,
    Topk,
    Powersgd,
    Acpsgd,
}

impl From<Method> for CompressorKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Ssgd => CompressorKind::Identity,
            Method::Sign => CompressorKind::SignMajority,
            Method::Topk => CompressorKind::TopkSampled,
            Method::Powersgd => CompressorKind::PowerSgd,
            Method::Acpsgd => CompressorKind::AcpSgd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Naive,
    Wfbp,
    WfbpTf,
}

impl From<Mode> for ScheduleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Naive => ScheduleMode::Naive,
            Mode::Wfbp => ScheduleMode::Wfbp,
            Mode::WfbpTf => ScheduleMode::WfbpTf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransportFlag {
    Inproc,
    Tcp,
}

/// Compression and scheduling flags shared by several subcommands.
#[derive(Args, Debug, Clone)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value = "ssgd")]
    pub method: Method,
    /// Target rank for powersgd/acpsgd.
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Fraction of entries Top-k keeps per tensor.
    #[arg(long, default_value_t = 0.01)]
    pub topk: f64,
    #[arg(long)]
    pub no_ef: bool,
    #[arg(long)]
    pub no_reuse: bool,
    #[arg(long, value_enum, default_value = "wfbp-tf")]
    pub mode: Mode,
    /// Fusion buffer for uncompressed tensors, scaled by compression rate.
    #[arg(long, default_value_t = 25.0)]
    pub buffer_mb: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    pub fn compressor(&self) -> Result<CompressorConfig, CliError> {
        let kind = CompressorKind::from(self.method);
        let mut cfg = CompressorConfig::new(kind)
            .with_rank(self.rank)
            .with_topk_density(self.topk)
            .with_seed(self.seed)
            .with_reuse(!self.no_reuse);
        if self.no_ef {
            cfg = cfg.with_error_feedback(false);
        }
        cfg.validate()
            .map_err(|e| usage(strip_config(&e.to_string())))?;
        Ok(cfg)
    }

    pub fn buffer(&self) -> Result<BufferPolicy, CliError> {
        if !(self.buffer_mb >= 0.0) {
            return Err(usage("buffer size must be ≥ 0"));
        }
        let bytes = if self.buffer_mb.is_finite() {
            (self.buffer_mb * MB as f64).round() as u64
        } else {
            u64::MAX
        };
        if bytes == 0 {
            return Ok(BufferPolicy::Fixed(0));
        }
        Ok(BufferPolicy::Compressed {
            default_bytes: bytes,
        })
    }
}

fn strip_config(msg: &str) -> String {
    msg.strip_prefix("invalid configuration: ")
        .unwrap_or(msg)
        .to_string()
}

/// Output directory flag.
#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl OutArgs {
    pub fn ensure(&self) -> Result<&PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| usage(format!("bad {what} {v:?}"))))
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Predict(a) => analysis::predict(a),
        Command::Sweep(a) => analysis::sweep(a),
        Command::Stats(a) => analysis::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
