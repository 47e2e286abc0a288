use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use clap::Args;

use gradax::collectives::transport::port_base_from_env;
use gradax::collectives::Communicator;
use gradax::trainer::{
    load_dataset, train_with_timeout, train_worker, Activation, DataSource, ModelSpec, TrainConfig,
    TrainError, TrainReport,
};

use crate::output::{write_csv, write_csv_header, write_json, write_text};
use crate::{parse_list, usage, CliError, MethodArgs, OutArgs, TransportFlag};

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "inproc")]
    pub transport: TransportFlag,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Rows per worker per step.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Comma-separated epochs at which the learning rate drops 10x.
    #[arg(long, default_value = "")]
    pub decay: String,
    /// Hidden layer widths.
    #[arg(long, default_value = "64")]
    pub hidden: String,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    /// `synthetic`, `csv:FILE[,LABELS]` or `idx:IMAGES,LABELS`.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Verify the error-feedback invariant every this many steps.
    #[arg(long)]
    pub ef_check: Option<usize>,
    /// Seconds a worker waits on a peer before giving up.
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
    /// Rank of this process in a TCP run; set by the launcher.
    #[arg(long, hide = true)]
    pub node_rank: Option<usize>,
    /// World size of a TCP run; set by the launcher.
    #[arg(long, hide = true)]
    pub world: Option<usize>,
}

impl TrainArgs {
    fn source(&self) -> Result<DataSource, CliError> {
        let (kind, rest) = self
            .data
            .split_once(':')
            .unwrap_or((self.data.as_str(), ""));
        let paths: Vec<PathBuf> = rest
            .split(',')
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        match (kind, paths.len()) {
            ("synthetic", 0) => Ok(DataSource::Synthetic {
                classes: self.classes,
                dim: self.dim,
                n: self.samples,
                seed: self.method.seed,
            }),
            ("csv", 1) => Ok(DataSource::Csv {
                features: paths[0].clone(),
                labels: None,
            }),
            ("csv", 2) => Ok(DataSource::Csv {
                features: paths[0].clone(),
                labels: Some(paths[1].clone()),
            }),
            ("idx", 2) => Ok(DataSource::Idx {
                images: paths[0].clone(),
                labels: paths[1].clone(),
            }),
            _ => Err(usage(format!("bad --data {:?}", self.data))),
        }
    }

    fn config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            base_lr: self.lr,
            momentum: self.momentum,
            warmup_epochs: self.warmup,
            decay_epochs: parse_list(&self.decay, "decay epoch")?,
            compressor: self.method.compressor()?,
            mode: self.method.mode.into(),
            buffer: self.method.buffer()?,
            world: self.workers,
            seed: self.method.seed,
            max_steps: self.max_steps,
            ef_check_interval: self.ef_check,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(train_error)?;
        Ok(cfg)
    }

    fn timeout(&self) -> Result<Duration, CliError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(usage("timeout must be > 0"));
        }
        Ok(Duration::from_secs_f64(self.timeout_s))
    }
}

pub fn train_error(e: TrainError) -> CliError {
    let msg = e.to_string();
    if e.is_divergence() {
        CliError::Divergence(msg)
    } else if e.is_transport() {
        CliError::Transport(msg)
    } else if let TrainError::Config(m) = &e {
        usage(m)
    } else if let TrainError::Compress(c) = &e {
        usage(
            c.to_string()
                .strip_prefix("invalid configuration: ")
                .unwrap_or(&c.to_string()),
        )
    } else {
        CliError::Io(msg)
    }
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let cfg = args.config()?;
    let timeout = args.timeout()?;
    let hidden: Vec<usize> = parse_list(&args.hidden, "hidden width")?;
    let activation: Activation = args.activation.parse().map_err(train_error)?;
    let source = args.source()?;

    if args.transport == TransportFlag::Tcp && args.node_rank.is_none() {
        return launch_tcp(&args);
    }

    let split = load_dataset(&source, args.method.seed).map_err(|e| CliError::Io(e.to_string()))?;
    let mut widths = vec![split.train.dim];
    widths.extend(hidden);
    widths.push(split.train.classes.max(split.test.classes));
    let spec = ModelSpec {
        activation,
        ..ModelSpec::mlp(widths).with_seed(args.method.seed)
    };
    spec.validate().map_err(train_error)?;

    let report = match (args.transport, args.node_rank) {
        (TransportFlag::Tcp, Some(rank)) => {
            let world = args.world.unwrap_or(args.workers);
            if world != args.workers || rank >= world {
                return Err(usage(format!("rank {rank} does not fit world {world}")));
            }
            let base = port_base_from_env().map_err(|e| usage(e.to_string()))?;
            let mut comm = Communicator::tcp(rank, world, base, timeout)
                .map_err(|e| CliError::Transport(e.to_string()))?;
            let report = train_worker(&spec, &split, &cfg, &mut comm).map_err(train_error)?;
            if rank != 0 {
                return Ok(());
            }
            report
        }
        _ => train_with_timeout(&spec, &split, &cfg, Some(timeout)).map_err(train_error)?,
    };
    write_outputs(&args, &report)
}

fn write_outputs(args: &TrainArgs, report: &TrainReport) -> Result<(), CliError> {
    let dir = args.out.ensure()?;
    write_json(&dir.join("report.json"), report)?;
    if report.traffic.is_empty() {
        write_csv_header(
            &dir.join("traffic.csv"),
            &[
                "worker",
                "stream",
                "bytes_sent",
                "bytes_received",
                "wire_bytes_sent",
                "launches",
            ],
        )?;
    } else {
        write_csv(&dir.join("traffic.csv"), &report.traffic)?;
    }
    let csv = report
        .timeline
        .to_csv()
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&dir.join("timeline.csv"), &csv)?;
    let last = report.epochs.last();
    println!(
        "{} epochs, {} steps, final loss {:.4}, accuracy {:.4}",
        report.epochs.len(),
        report.steps,
        last.map_or(f64::NAN, |e| e.train_loss),
        report.final_accuracy
    );
    Ok(())
}

/// Re-runs this binary once per worker over loopback TCP and waits.
fn launch_tcp(args: &TrainArgs) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Io(e.to_string()))?;
    let passed: Vec<String> = std::env::args().skip(1).collect();
    let mut children = Vec::with_capacity(args.workers);
    for rank in 0..args.workers {
        let child = Command::new(&exe)
            .args(&passed)
            .args([
                "--node-rank",
                &rank.to_string(),
                "--world",
                &args.workers.to_string(),
            ])
            .spawn()
            .map_err(|e| CliError::Transport(format!("cannot start worker {rank}: {e}")))?;
        children.push(child);
    }
    let mut codes = Vec::with_capacity(children.len());
    for (rank, mut child) in children.into_iter().enumerate() {
        let status = child
            .wait()
            .map_err(|e| CliError::Transport(format!("worker {rank}: {e}")))?;
        codes.push((rank, status.code().unwrap_or(3)));
    }
    let worst = |c: i32| codes.iter().find(|(_, code)| *code == c);
    if let Some((rank, _)) = worst(3) {
        return Err(CliError::Transport(format!("worker {rank} lost its peers")));
    }
    if let Some((rank, _)) = worst(2) {
        return Err(CliError::Divergence(format!("worker {rank} diverged")));
    }
    if let Some((rank, code)) = codes.iter().find(|(_, c)| *c != 0) {
        return Err(usage(format!("worker {rank} exited with code {code}")));
    }
    Ok(())
}
