use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use serde::{Deserialize, Serialize};

use gradax::collectives::transport::port_base_from_env;
use gradax::collectives::{CommError, Communicator, Stream};
use gradax::perfmodel::fit_alpha_beta;

use crate::output::{write_csv, write_json};
use crate::{parse_list, usage, CliError, OutArgs, TransportFlag};

pub const MIN_REPEATS: usize = 20;

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "inproc")]
    pub transport: TransportFlag,
    /// Comma-separated message sizes in bytes.
    #[arg(long, default_value = "32768,65536")]
    pub sizes: String,
    #[arg(long, default_value_t = MIN_REPEATS)]
    pub repeats: usize,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub op: String,
    pub size_bytes: u64,
    pub workers: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    pub iqr_s: f64,
    /// Data bytes rank 0 sent in one call.
    pub bytes_sent: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    /// Size of each of the two unfused tensors.
    pub size_bytes: u64,
    pub workers: usize,
    pub unfused_pair_median_s: f64,
    pub fused_median_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    AllReduce,
    AllGather,
    UnfusedPair,
    Fused,
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time_op(
    comm: &mut Communicator,
    op: Op,
    size: u64,
    repeats: usize,
) -> Result<(Vec<f64>, u64), CommError> {
    let elems = (size as usize).div_ceil(4);
    let mut samples = Vec::with_capacity(repeats);
    let mut sent = 0;
    for _ in 0..repeats {
        comm.control().barrier()?;
        let g = comm.stream(Stream::Dense);
        let before = g.bytes_sent();
        let start = Instant::now();
        match op {
            Op::AllReduce => g.ring_all_reduce(&mut vec![1.0f32; elems])?,
            Op::AllGather => {
                g.all_gather(&vec![7u8; size as usize])?;
            }
            Op::UnfusedPair => {
                g.ring_all_reduce(&mut vec![1.0f32; elems])?;
                g.ring_all_reduce(&mut vec![1.0f32; elems])?;
            }
            Op::Fused => g.ring_all_reduce(&mut vec![1.0f32; 2 * elems])?,
        }
        samples.push(start.elapsed().as_secs_f64());
        sent = g.bytes_sent() - before;
    }
    Ok((samples, sent))
}

fn communicators(args: &BenchArgs) -> Result<Vec<Communicator>, CliError> {
    let timeout = Duration::from_secs_f64(args.timeout_s);
    match args.transport {
        TransportFlag::Inproc => {
            let mut comms = Communicator::in_process(args.workers);
            for c in &mut comms {
                c.set_timeout(timeout);
            }
            Ok(comms)
        }
        TransportFlag::Tcp => {
            let base = port_base_from_env().map_err(|e| usage(e.to_string()))?;
            let p = args.workers;
            let made: Vec<Result<Communicator, CommError>> = thread::scope(|s| {
                let hs: Vec<_> = (0..p)
                    .map(|r| s.spawn(move || Communicator::tcp(r, p, base, timeout)))
                    .collect();
                hs.into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(CommError::Protocol("connect panicked".into())))
                    })
                    .collect()
            });
            made.into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Transport(e.to_string()))
        }
    }
}

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    if args.workers == 0 {
        return Err(usage("workers must be ≥ 1"));
    }
    if args.repeats < MIN_REPEATS {
        return Err(usage(format!("repeats must be ≥ {MIN_REPEATS}")));
    }
    if !(args.timeout_s > 0.0 && args.timeout_s.is_finite()) {
        return Err(usage("timeout must be > 0"));
    }
    let sizes: Vec<u64> = parse_list(&args.sizes, "size")?;
    if sizes.is_empty() {
        return Err(usage("size grid is empty"));
    }
    let dir = args.out.ensure()?.clone();
    let comms = communicators(&args)?;
    let ops = [Op::AllReduce, Op::AllGather, Op::UnfusedPair, Op::Fused];
    let repeats = args.repeats;
    let per_rank: Vec<Result<Vec<(Op, u64, Vec<f64>, u64)>, CommError>> = thread::scope(|s| {
        let hs: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                let sizes = &sizes;
                s.spawn(move || {
                    let mut out = Vec::new();
                    for &size in sizes {
                        for op in ops {
                            let (samples, sent) = time_op(&mut comm, op, size, repeats)?;
                            out.push((op, size, samples, sent));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        hs.into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CommError::Protocol("bench worker panicked".into())))
            })
            .collect()
    });
    let mut results = None;
    for r in per_rank {
        let r = r.map_err(|e| CliError::Transport(e.to_string()))?;
        results.get_or_insert(r);
    }
    let results = results.unwrap_or_default();

    let median = |op: Op, size: u64| -> f64 {
        results
            .iter()
            .find(|(o, s, _, _)| *o == op && *s == size)
            .map(|(_, _, v, _)| {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                quantile(&v, 0.5)
            })
            .unwrap_or(f64::NAN)
    };
    let mut rows = Vec::new();
    for (op, size, samples, sent) in &results {
        let name = match op {
            Op::AllReduce => "allreduce",
            Op::AllGather => "allgather",
            _ => continue,
        };
        let mut v = samples.clone();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
        rows.push(BenchRow {
            op: name.into(),
            size_bytes: *size,
            workers: args.workers,
            repeats,
            median_s: quantile(&v, 0.5),
            q1_s: q1,
            q3_s: q3,
            iqr_s: q3 - q1,
            bytes_sent: *sent,
        });
    }
    let fusion: Vec<FusionRow> = sizes
        .iter()
        .map(|&s| FusionRow {
            size_bytes: s,
            workers: args.workers,
            unfused_pair_median_s: median(Op::UnfusedPair, s),
            fused_median_s: median(Op::Fused, s),
        })
        .collect();
    write_csv(&dir.join("bench.csv"), &rows)?;
    write_csv(&dir.join("fusion.csv"), &fusion)?;

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.op == "allreduce")
        .map(|r| (r.size_bytes as f64, r.median_s))
        .collect();
    match fit_alpha_beta(&points, args.workers) {
        Ok(fit) => {
            write_json(&dir.join("fit.json"), &fit)?;
            println!(
                "alpha {:.3e} s, beta {:.3e} s/B, rms residual {:.3e} s",
                fit.model.alpha, fit.model.beta, fit.rms_residual
            );
        }
        Err(e) => println!("no cost-model fit: {e}"),
    }
    Ok(())
}
