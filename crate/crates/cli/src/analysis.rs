use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use gradax::overlap::{Breakdown, MB};
use gradax::perfmodel::{
    factor_elements, sweep as run_sweep, CostModel, ModelProfile, PerfError, PredictOptions,
    Scenario, SweepAxis, DEFAULT_INTERFERENCE,
};
use gradax::tensor::reshape_to_matrix;

use crate::output::{write_csv, write_json, write_text};
use crate::{parse_list, usage, CliError, MethodArgs, OutArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Mlp,
    BertLarge,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    pub model: ModelKind,
    /// All layer widths of the MLP, input first.
    #[arg(long, default_value = "32,64,64,2")]
    pub widths: String,
    /// Layer profile JSON; overrides --model.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Backward seconds per parameter for built-in MLP profiles, in ns.
    #[arg(long, default_value_t = 1.0)]
    pub bp_ns_per_param: f64,
}

impl ProfileArgs {
    fn load(&self, rank: usize) -> Result<ModelProfile, CliError> {
        if let Some(path) = &self.profile {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            return ModelProfile::from_json(&text).map_err(perf_error);
        }
        match self.model {
            ModelKind::BertLarge => Ok(ModelProfile::bert_large_like(rank)),
            ModelKind::Mlp => {
                if !(self.bp_ns_per_param >= 0.0 && self.bp_ns_per_param.is_finite()) {
                    return Err(usage("backward cost must be ≥ 0"));
                }
                let widths: Vec<usize> = parse_list(&self.widths, "width")?;
                ModelProfile::mlp(
                    &widths,
                    self.bp_ns_per_param * 1e-9,
                    2.0 * rank as f64 / 1e13,
                )
                .map_err(perf_error)
            }
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CostArgs {
    #[arg(long, default_value_t = 8)]
    pub workers: usize,
    /// Seconds per hop; defaults to the 32 KB/64 KB reference fit.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seconds per byte; defaults to the reference fit.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_INTERFERENCE)]
    pub interference: f64,
}

impl CostArgs {
    fn model(&self) -> Result<CostModel, CliError> {
        if self.workers == 0 {
            return Err(usage("workers must be ≥ 1"));
        }
        let reference = CostModel::reference(self.workers).with_workers(self.workers);
        CostModel::new(
            self.alpha.unwrap_or(reference.alpha),
            self.beta.unwrap_or(reference.beta),
            self.workers,
        )
        .map_err(perf_error)
    }
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 0)]
    pub iteration: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// buffer-size, rank, workers, alpha or beta.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid. Buffer sizes are MB and accept `inf`.
    #[arg(long)]
    pub values: String,
}

#[derive(Args, Debug, Clone)]
pub struct StatsArgs {
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
}

fn perf_error(e: PerfError) -> CliError {
    match e {
        PerfError::Invalid(m) => usage(m),
        other => usage(other.to_string()),
    }
}

fn scenario(
    method: &MethodArgs,
    profile: &ProfileArgs,
    cost: &CostArgs,
    iteration: u64,
) -> Result<Scenario, CliError> {
    if !(cost.interference >= 1.0 && cost.interference.is_finite()) {
        return Err(usage("interference must be ≥ 1"));
    }
    let compressor = method.compressor()?;
    Ok(Scenario {
        profile: profile.load(compressor.rank)?,
        compressor,
        mode: method.mode.into(),
        buffer: method.buffer()?,
        cost: cost.model()?,
        options: PredictOptions {
            interference: cost.interference,
            iteration,
        },
    })
}

#[derive(Serialize)]
struct PredictionReport {
    cost: CostModel,
    breakdown: Breakdown,
    iteration_s: f64,
    launches: usize,
    bytes_sent: u64,
    comm_volume_elements: f64,
}

pub fn predict(args: PredictArgs) -> Result<(), CliError> {
    let s = scenario(&args.method, &args.profile, &args.cost, args.iteration)?;
    let p = s.predict().map_err(perf_error)?;
    let dir = args.out.ensure()?;
    let report = PredictionReport {
        cost: s.cost,
        breakdown: p.breakdown,
        iteration_s: p.iteration_s,
        launches: p.launches,
        bytes_sent: p.bytes_sent,
        comm_volume_elements: s.comm_volume().map_err(perf_error)?,
    };
    write_json(&dir.join("prediction.json"), &report)?;
    let csv = p
        .timeline
        .to_csv()
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&dir.join("timeline.csv"), &csv)?;
    println!(
        "iteration {:.3} ms: compute {:.3} ms, compress {:.3} ms, exposed comm {:.3} ms, {} launches",
        p.iteration_s * 1e3,
        p.breakdown.compute_s * 1e3,
        p.breakdown.compress_s * 1e3,
        p.breakdown.nonoverlapped_comm_s * 1e3,
        p.launches
    );
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let axis: SweepAxis = args.axis.parse().map_err(perf_error)?;
    let mut values: Vec<f64> = parse_list(&args.values, "sweep value")?;
    if values.is_empty() {
        return Err(usage("sweep grid is empty"));
    }
    if axis == SweepAxis::BufferSize {
        for v in &mut values {
            *v *= MB as f64;
        }
    }
    let base = scenario(&args.method, &args.profile, &args.cost, 0)?;
    let rows = run_sweep(&base, axis, &values).map_err(perf_error)?;
    let dir = args.out.ensure()?;
    write_csv(&dir.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("{} {}: {:.3} ms", r.axis, r.value, r.iteration_s * 1e3);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    /// `M` for gradient tensors, `PQ` for low-rank factors.
    pub series: String,
    pub tensor: usize,
    pub name: String,
    pub elements: u64,
    pub cumulative_fraction: f64,
}

pub fn stats(args: StatsArgs) -> Result<(), CliError> {
    if args.rank == 0 {
        return Err(usage("rank must be ≥ 1"));
    }
    let profile = args.profile.load(args.rank)?;
    let mut m_rows = Vec::new();
    let mut f_rows = Vec::new();
    let mut t = 0;
    for layer in &profile.layers {
        for (j, shape) in layer.tensors.iter().enumerate() {
            let policy = reshape_to_matrix(shape).map_err(|e| usage(e.to_string()))?;
            let name = format!("{}.{}", layer.name, j);
            m_rows.push((t, name.clone(), policy.numel() as u64));
            if policy.compressible {
                let r = args.rank.min(policy.max_rank());
                f_rows.push((t, format!("{name}.P"), (policy.rows * r) as u64));
                f_rows.push((t, format!("{name}.Q"), (policy.cols * r) as u64));
            }
            t += 1;
        }
    }
    debug_assert_eq!(
        f_rows.iter().map(|r| r.2).sum::<u64>(),
        factor_elements(&profile.shapes(), args.rank).unwrap_or(0)
    );
    let mut rows = cdf("M", m_rows);
    rows.extend(cdf("PQ", f_rows));
    let dir = args.out.ensure()?;
    write_csv(&dir.join("cdf.csv"), &rows)?;
    println!("{} rows", rows.len());
    Ok(())
}

fn cdf(series: &str, mut rows: Vec<(usize, String, u64)>) -> Vec<CdfRow> {
    rows.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let n = rows.len();
    rows.into_iter()
        .enumerate()
        .map(|(i, (tensor, name, elements))| CdfRow {
            series: series.into(),
            tensor,
            name,
            elements,
            cumulative_fraction: if i + 1 == n {
                1.0
            } else {
                (i + 1) as f64 / n as f64
            },
        })
        .collect()
}
