//! α-β cost model: communication volumes, collective times, fitting from
//! micro-benchmarks and event-driven iteration prediction.
//!
//! Predicted iterations use the same [`Timeline`] type as live runs, so
//! [`measure_breakdown`] applies to both.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::Stream;
use crate::compressors::{CompressorConfig, CompressorKind};
use crate::overlap::{
    measure_breakdown, Breakdown, BufferPolicy, EngineError, Event, PayloadTable, ScheduleMode,
    SchedulePlan, TaskKind, Timeline,
};
use crate::tensor::reshape_to_matrix;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("profile json: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, PerfError> {
    Err(PerfError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds per collective hop.
    pub alpha: f64,
    /// Seconds per byte.
    pub beta: f64,
    pub p: usize,
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64, p: usize) -> Result<Self, PerfError> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) || p == 0 {
            return invalid(format!(
                "need alpha ≥ 0, beta ≥ 0, p ≥ 1 (got {alpha}, {beta}, {p})"
            ));
        }
        Ok(Self { alpha, beta, p })
    }

    pub fn with_workers(mut self, p: usize) -> Self {
        self.p = p.max(1);
        self
    }

    /// Model calibrated so that one all-reduce of `x` bytes costs
    /// 0.8 ms + x · 0.2 ms / 32 KiB at any `p`.
    pub fn reference(p: usize) -> Self {
        let points = [(32.0 * 1024.0, 1.0e-3), (64.0 * 1024.0, 1.2e-3)];
        let p = p.max(2);
        fit_alpha_beta(&points, p)
            .expect("two distinct sizes")
            .model
    }

    pub fn allreduce_time(&self, bytes: f64) -> f64 {
        allreduce_time(bytes, self)
    }

    pub fn allgather_time(&self, bytes: f64) -> f64 {
        allgather_time(bytes, self)
    }
}

/// Ring all-reduce of a `bytes`-sized buffer.
pub fn allreduce_time(bytes: f64, cm: &CostModel) -> f64 {
    let p = cm.p as f64;
    2.0 * (p - 1.0) * cm.alpha + 2.0 * (p - 1.0) / p * bytes * cm.beta
}

/// Ring all-gather where each worker contributes `bytes`.
pub fn allgather_time(bytes: f64, cm: &CostModel) -> f64 {
    let p = cm.p as f64;
    (p - 1.0) * cm.alpha + (p - 1.0) * bytes * cm.beta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaFit {
    pub model: CostModel,
    /// Fitted start-up term of one all-reduce, seconds.
    pub intercept_s: f64,
    /// Fitted seconds per byte of one all-reduce.
    pub slope_s_per_byte: f64,
    /// Measured minus fitted seconds, in input order.
    pub residuals: Vec<f64>,
    pub rms_residual: f64,
}

/// Least-squares fit of all-reduce `seconds = A + B·bytes` over
/// `(bytes, seconds)` measurements taken at world size `p`.
pub fn fit_alpha_beta(measurements: &[(f64, f64)], p: usize) -> Result<AlphaBetaFit, PerfError> {
    if p < 2 {
        return invalid("cannot separate alpha and beta from a single-worker measurement");
    }
    if measurements
        .iter()
        .any(|(b, s)| !b.is_finite() || !s.is_finite() || *b < 0.0)
    {
        return invalid("measurements must be finite with nonnegative sizes");
    }
    let n = measurements.len() as f64;
    let mean_x = measurements.iter().map(|m| m.0).sum::<f64>() / n;
    let mean_y = measurements.iter().map(|m| m.1).sum::<f64>() / n;
    let sxx: f64 = measurements.iter().map(|m| (m.0 - mean_x).powi(2)).sum();
    let sxy: f64 = measurements
        .iter()
        .map(|m| (m.0 - mean_x) * (m.1 - mean_y))
        .sum();
    if measurements.len() < 2 || sxx <= 0.0 {
        return invalid("need at least two distinct message sizes");
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals: Vec<f64> = measurements
        .iter()
        .map(|m| m.1 - (intercept + slope * m.0))
        .collect();
    let rms_residual = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let pf = p as f64;
    let hops = 2.0 * (pf - 1.0);
    let model = CostModel {
        alpha: (intercept / hops).max(0.0),
        beta: (slope * pf / hops).max(0.0),
        p,
    };
    Ok(AlphaBetaFit {
        model,
        intercept_s: intercept,
        slope_s_per_byte: slope,
        residuals,
        rms_residual,
    })
}

/// Low-rank factor elements `Σ (n + m)·r` over the matrix-shaped tensors,
/// with `r` clamped to each tensor's `min(n, m)`. Vectors are not counted.
pub fn factor_elements(shapes: &[Vec<usize>], r: usize) -> Result<u64, PerfError> {
    let mut total = 0u64;
    for s in shapes {
        let policy = reshape_to_matrix(s).map_err(|e| PerfError::Invalid(e.to_string()))?;
        if policy.compressible {
            total += ((policy.rows + policy.cols) * r.min(policy.max_rank())) as u64;
        }
    }
    Ok(total)
}

/// Elements each worker sends per iteration (two-iteration average for
/// ACP-SGD). `n` is the model size, `k` the Top-k count, `r` the rank.
pub fn comm_volume(
    kind: CompressorKind,
    n: u64,
    p: usize,
    k: u64,
    r: usize,
    shapes: &[Vec<usize>],
) -> Result<f64, PerfError> {
    if p == 0 {
        return invalid("p must be ≥ 1");
    }
    let pf = p as f64;
    let ring = 2.0 * (pf - 1.0) / pf;
    Ok(match kind {
        CompressorKind::Identity => ring * n as f64,
        CompressorKind::SignMajority => (pf - 1.0) * n as f64 / 32.0,
        CompressorKind::TopkSampled => {
            if k == 0 || k > n {
                return invalid(format!("k={k} must be in 1..={n}"));
            }
            (pf - 1.0) * 2.0 * k as f64
        }
        CompressorKind::PowerSgd | CompressorKind::AcpSgd => {
            if r == 0 {
                return invalid("rank must be ≥ 1");
            }
            if shapes.is_empty() {
                return invalid("low-rank volume needs tensor shapes");
            }
            let nc = factor_elements(shapes, r)? as f64;
            if kind == CompressorKind::PowerSgd {
                ring * nc
            } else {
                ring * nc / 2.0
            }
        }
    })
}

/// Timings and tensors of one layer, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    #[serde(default)]
    pub ff_s: f64,
    pub bp_s: f64,
    /// Encoding time for all of the layer's tensors. Power-SGD spends half
    /// before the P round and half before the Q round.
    #[serde(default)]
    pub compress_s: f64,
    #[serde(default)]
    pub decode_s: f64,
    pub tensors: Vec<Vec<usize>>,
}

/// Layers in forward order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub layers: Vec<LayerProfile>,
}

impl ModelProfile {
    pub fn from_json(text: &str) -> Result<Self, PerfError> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String, PerfError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.layers.is_empty() {
            return invalid("profile has no layers");
        }
        for l in &self.layers {
            let times = [l.ff_s, l.bp_s, l.compress_s, l.decode_s];
            if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return invalid(format!(
                    "layer {}: times must be finite and nonnegative",
                    l.name
                ));
            }
            if l.tensors.is_empty() {
                return invalid(format!("layer {} has no tensors", l.name));
            }
        }
        Ok(())
    }

    /// Tensor shapes, layer by layer in forward order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors.iter().cloned())
            .collect()
    }

    pub fn num_elements(&self) -> u64 {
        self.shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Tensor ids grouped by layer in backward order.
    fn backward_layers(&self) -> Vec<(usize, Vec<usize>)> {
        let mut next = 0;
        let mut ids = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            ids.push((i, (next..next + l.tensors.len()).collect::<Vec<_>>()));
            next += l.tensors.len();
        }
        ids.reverse();
        ids
    }

    /// Tensor ids in gradient-ready order.
    pub fn ready_order(&self) -> Vec<usize> {
        self.backward_layers()
            .into_iter()
            .flat_map(|(_, t)| t)
            .collect()
    }

    /// Fully connected layers with compute proportional to parameters.
    pub fn mlp(
        widths: &[usize],
        bp_s_per_param: f64,
        compress_s_per_param: f64,
    ) -> Result<Self, PerfError> {
        if widths.len() < 2 || widths.contains(&0) {
            return invalid("need at least two positive widths");
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let params = (w[0] * w[1] + w[1]) as f64;
                LayerProfile {
                    name: format!("fc{i}"),
                    ff_s: params * bp_s_per_param / 2.0,
                    bp_s: params * bp_s_per_param,
                    compress_s: params * compress_s_per_param,
                    decode_s: 0.0,
                    tensors: vec![vec![w[1], w[0]], vec![w[1]]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Transformer encoder shaped like BERT-Large: 24 blocks of hidden
    /// size 1024 and feed-forward size 4096 after a 30522-token embedding.
    /// Backward costs 1 ns per parameter; encoding costs `2·r` flops per
    /// parameter at 10 Tflop/s for rank `rank`.
    pub fn bert_large_like(rank: usize) -> Self {
        let (hidden, ffn, vocab, blocks) = (1024, 4096, 30522, 24);
        let bp_per_param = 1e-9;
        let compress_per_param = 2.0 * rank as f64 / 1e13;
        let layer = |name: String, tensors: Vec<Vec<usize>>| {
            let params: usize = tensors.iter().map(|s| s.iter().product::<usize>()).sum();
            let params = params as f64;
            LayerProfile {
                name,
                ff_s: params * bp_per_param / 2.0,
                bp_s: params * bp_per_param,
                compress_s: params * compress_per_param,
                decode_s: params * compress_per_param / 2.0,
                tensors,
            }
        };
        let mut layers = vec![layer(
            "embeddings".into(),
            vec![
                vec![vocab, hidden],
                vec![512, hidden],
                vec![hidden],
                vec![hidden],
            ],
        )];
        for b in 0..blocks {
            layers.push(layer(
                format!("block{b}.attention"),
                vec![
                    vec![3 * hidden, hidden],
                    vec![3 * hidden],
                    vec![hidden, hidden],
                    vec![hidden],
                    vec![hidden],
                    vec![hidden],
                ],
            ));
            layers.push(layer(
                format!("block{b}.ffn"),
                vec![
                    vec![ffn, hidden],
                    vec![ffn],
                    vec![hidden, ffn],
                    vec![hidden],
                    vec![hidden],
                    vec![hidden],
                ],
            ));
        }
        layers.push(layer(
            "pooler".into(),
            vec![vec![hidden, hidden], vec![hidden]],
        ));
        Self { layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Slowdown applied to backward and encoding work when Power-SGD
    /// overlaps communication with compute.
    pub interference: f64,
    /// Iteration index; selects the ACP-SGD factor.
    pub iteration: u64,
}

pub const DEFAULT_INTERFERENCE: f64 = 1.13;

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            interference: DEFAULT_INTERFERENCE,
            iteration: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub timeline: Timeline,
    pub breakdown: Breakdown,
    pub iteration_s: f64,
    pub launches: usize,
    /// Data bytes each worker sends.
    pub bytes_sent: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Work {
    Encode,
    QCompute,
    Bp,
    Decode,
}

struct ComputeTask {
    work: Work,
    ready: f64,
    duration: f64,
    id: String,
    /// Tensor whose Q payload this produces.
    q_tensor: Option<usize>,
    /// Layer position in backward order for BP and encode.
    step: Option<usize>,
}

struct SimBucket {
    stream: Stream,
    tensors: Vec<usize>,
    missing: usize,
    sealed_at: Option<f64>,
    bytes: usize,
    done: bool,
}

/// Simulates one iteration on a single compute context and a single
/// communication context, both non-preemptive.
pub fn predict_iteration(
    profile: &ModelProfile,
    cfg: &CompressorConfig,
    mode: ScheduleMode,
    plan: &SchedulePlan,
    cm: &CostModel,
    opts: &PredictOptions,
) -> Result<Prediction, PerfError> {
    profile.validate()?;
    if !(opts.interference >= 1.0 && opts.interference.is_finite()) {
        return invalid("interference multiplier must be ≥ 1");
    }
    let shapes = profile.shapes();
    let table = PayloadTable::analytic(cfg, &shapes)?;
    let kind = cfg.kind;
    let acp_stream = if opts.iteration % 2 == 0 {
        Stream::P
    } else {
        Stream::Q
    };
    let rounds = |t: usize| -> Vec<Stream> {
        if !table.tensors[t].factorized {
            vec![Stream::Dense]
        } else if kind == CompressorKind::PowerSgd {
            vec![Stream::P, Stream::Q]
        } else {
            vec![acp_stream]
        }
    };

    let backward = profile.backward_layers();
    let ready_order: Vec<usize> = backward
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect();
    let mut per_stream: BTreeMap<Stream, Vec<usize>> = BTreeMap::new();
    for &t in &ready_order {
        for s in rounds(t) {
            per_stream.entry(s).or_default().push(t);
        }
    }

    let mut buckets: Vec<SimBucket> = Vec::new();
    for (&stream, tensors) in &per_stream {
        let groups: Vec<Vec<usize>> = match mode {
            ScheduleMode::Naive => vec![tensors.clone()],
            ScheduleMode::Wfbp => tensors.iter().map(|&t| vec![t]).collect(),
            ScheduleMode::WfbpTf => {
                let bp = plan.stream(stream).ok_or_else(|| {
                    PerfError::Invalid(format!("plan has no buckets for stream {stream}"))
                })?;
                let groups: Vec<Vec<usize>> = bp
                    .buckets
                    .iter()
                    .map(|b| {
                        b.tensors()
                            .filter(|t| tensors.contains(t))
                            .collect::<Vec<_>>()
                    })
                    .filter(|b| !b.is_empty())
                    .collect();
                let mut covered: Vec<usize> = groups.iter().flatten().copied().collect();
                covered.sort_unstable();
                let mut want = tensors.clone();
                want.sort_unstable();
                if covered != want {
                    return invalid(format!(
                        "plan for stream {stream} does not match the profile"
                    ));
                }
                groups
            }
        };
        for g in groups {
            buckets.push(SimBucket {
                stream,
                bytes: g.iter().map(|&t| table.tensors[t].bytes(stream)).sum(),
                missing: g.len(),
                tensors: g,
                sealed_at: None,
                done: false,
            });
        }
    }
    let mut bucket_of: HashMap<(Stream, usize), usize> = HashMap::new();
    for (i, b) in buckets.iter().enumerate() {
        for &t in &b.tensors {
            bucket_of.insert((b.stream, t), i);
        }
    }

    let slow = if kind == CompressorKind::PowerSgd && mode != ScheduleMode::Naive {
        opts.interference
    } else {
        1.0
    };
    // Share of a layer's compress/decode time owed to each tensor, among
    // the layer's tensors that pass `filter`.
    let share_among = |layer: usize, t: usize, filter: &dyn Fn(usize) -> bool| -> f64 {
        let layer_tensors = &backward.iter().find(|(l, _)| *l == layer).expect("layer").1;
        let total: usize = layer_tensors
            .iter()
            .filter(|&&u| filter(u))
            .map(|&u| table.tensors[u].raw_bytes)
            .sum();
        table.tensors[t].raw_bytes as f64 / total.max(1) as f64
    };
    let share = |layer: usize, t: usize| share_among(layer, t, &|_| true);
    let q_share = |layer: usize, t: usize| share_among(layer, t, &|u| table.tensors[u].factorized);
    let layer_of: HashMap<usize, usize> = backward
        .iter()
        .flat_map(|(l, ts)| ts.iter().map(move |&t| (t, *l)))
        .collect();

    let mut timeline = Timeline::new();
    let ff: f64 = profile.layers.iter().map(|l| l.ff_s).sum();
    if ff > 0.0 {
        timeline.push(event(TaskKind::Ff, "forward".into(), 0.0, ff, 0));
    }
    let mut compute_free = ff;
    let mut comm_free = 0.0f64;
    let mut pending: Vec<ComputeTask> = vec![ComputeTask {
        work: Work::Bp,
        ready: ff,
        duration: profile.layers[backward[0].0].bp_s * slow,
        id: profile.layers[backward[0].0].name.clone(),
        q_tensor: None,
        step: Some(0),
    }];
    let mut backward_done: Option<f64> = None;
    let mut encodes_left = backward.len();
    let mut launches = 0usize;
    let mut bytes_sent = 0u64;
    let mut seal_order: Vec<usize> = Vec::new();
    // Decodes wait for backward to finish.
    let mut held_decodes: Vec<ComputeTask> = Vec::new();

    let deliver = |buckets: &mut Vec<SimBucket>,
                   seal_order: &mut Vec<usize>,
                   s: Stream,
                   t: usize,
                   at: f64| {
        let i = bucket_of[&(s, t)];
        let b = &mut buckets[i];
        b.missing -= 1;
        if b.missing == 0 {
            b.sealed_at = Some(at);
            seal_order.push(i);
        }
    };

    loop {
        let compute_pick = pending
            .iter()
            .enumerate()
            .map(|(i, t)| (i, t.ready.max(compute_free)))
            .min_by(|(i, sa), (j, sb)| {
                sa.total_cmp(sb)
                    .then(pending[*i].work.cmp(&pending[*j].work))
                    .then(pending[*i].ready.total_cmp(&pending[*j].ready))
            });
        let comm_pick = seal_order
            .iter()
            .copied()
            .filter(|&i| !buckets[i].done)
            .filter_map(|i| {
                let sealed = buckets[i].sealed_at.expect("sealed");
                let gate = match mode {
                    ScheduleMode::Naive => sealed.max(backward_done?),
                    _ => sealed,
                };
                Some((i, gate.max(comm_free)))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));

        let take_comm = match (compute_pick, comm_pick) {
            (None, None) => break,
            (Some(_), None) => false,
            (None, Some(_)) => true,
            (Some((_, sc)), Some((_, sm))) => sm <= sc,
        };

        if take_comm {
            let (i, start) = comm_pick.expect("comm pick");
            let b = &mut buckets[i];
            let duration = if kind.additive() {
                cm.allreduce_time(b.bytes as f64)
            } else {
                cm.allgather_time(b.bytes as f64)
            };
            let end = start + duration;
            b.done = true;
            comm_free = end;
            launches += 1;
            let sent = wire_bytes(kind.additive(), b.bytes, cm.p);
            bytes_sent += sent;
            let label = format!(
                "{}:{}",
                b.stream.label(),
                b.tensors
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join("+")
            );
            timeline.push(event(TaskKind::Collective, label.clone(), start, end, sent));
            let tensors = b.tensors.clone();
            if b.stream == Stream::P && kind == CompressorKind::PowerSgd {
                for t in tensors {
                    let layer = layer_of[&t];
                    pending.push(ComputeTask {
                        work: Work::QCompute,
                        ready: end,
                        duration: profile.layers[layer].compress_s / 2.0 * q_share(layer, t) * slow,
                        id: format!("Q:{t}"),
                        q_tensor: Some(t),
                        step: None,
                    });
                }
            } else {
                let task = ComputeTask {
                    work: Work::Decode,
                    ready: end,
                    duration: tensors
                        .iter()
                        .map(|&t| profile.layers[layer_of[&t]].decode_s * share(layer_of[&t], t))
                        .sum(),
                    id: label,
                    q_tensor: None,
                    step: None,
                };
                match backward_done {
                    Some(_) => pending.push(task),
                    None => held_decodes.push(task),
                }
            }
            continue;
        }

        let (idx, start) = compute_pick.expect("compute pick");
        let task = pending.swap_remove(idx);
        let end = start + task.duration;
        compute_free = end;
        let kind_of = match task.work {
            Work::Bp => TaskKind::Bp,
            Work::Encode | Work::QCompute => TaskKind::Compress,
            Work::Decode => TaskKind::Decode,
        };
        if task.duration > 0.0 {
            timeline.push(event(kind_of, task.id.clone(), start, end, 0));
        }
        match task.work {
            Work::Bp => {
                let step = task.step.expect("bp step");
                let layer = backward[step].0;
                let encode_s = if kind == CompressorKind::PowerSgd {
                    profile.layers[layer].compress_s / 2.0
                } else {
                    profile.layers[layer].compress_s
                };
                pending.push(ComputeTask {
                    work: Work::Encode,
                    ready: end,
                    duration: encode_s * slow,
                    id: profile.layers[layer].name.clone(),
                    q_tensor: None,
                    step: Some(step),
                });
                if let Some((next, _)) = backward.get(step + 1) {
                    pending.push(ComputeTask {
                        work: Work::Bp,
                        ready: end,
                        duration: profile.layers[*next].bp_s * slow,
                        id: profile.layers[*next].name.clone(),
                        q_tensor: None,
                        step: Some(step + 1),
                    });
                }
            }
            Work::Encode => {
                let step = task.step.expect("encode step");
                for &t in &backward[step].1 {
                    deliver(&mut buckets, &mut seal_order, rounds(t)[0], t, end);
                }
                encodes_left -= 1;
                if encodes_left == 0 {
                    backward_done = Some(end);
                    pending.append(&mut held_decodes);
                }
            }
            Work::QCompute => {
                let t = task.q_tensor.expect("q tensor");
                deliver(&mut buckets, &mut seal_order, Stream::Q, t, end);
            }
            Work::Decode => {}
        }
    }

    if buckets.iter().any(|b| !b.done) {
        return invalid("simulation ended with unsent buckets");
    }
    let iteration_s = timeline.span();
    let breakdown = measure_breakdown(&timeline)?;
    Ok(Prediction {
        timeline,
        breakdown,
        iteration_s,
        launches,
        bytes_sent,
    })
}

fn event(kind: TaskKind, id: String, start_s: f64, end_s: f64, bytes: u64) -> Event {
    Event {
        worker: 0,
        kind,
        id,
        start_s,
        end_s,
        bytes,
    }
}

/// Bytes one worker sends in a ring collective over a `bytes` payload,
/// ignoring padding.
fn wire_bytes(additive: bool, bytes: usize, p: usize) -> u64 {
    if p < 2 {
        return 0;
    }
    let b = bytes as u64;
    let p = p as u64;
    if additive {
        2 * (p - 1) * b / p
    } else {
        (p - 1) * b
    }
}

/// Bucket plan for a profile without building a live compressor.
pub fn plan_for(
    profile: &ModelProfile,
    cfg: &CompressorConfig,
    policy: BufferPolicy,
) -> Result<SchedulePlan, PerfError> {
    let table = PayloadTable::analytic(cfg, &profile.shapes())?;
    Ok(SchedulePlan::from_table(
        &table,
        &profile.ready_order(),
        policy,
    )?)
}

/// Everything a prediction depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub profile: ModelProfile,
    pub compressor: CompressorConfig,
    pub mode: ScheduleMode,
    pub buffer: BufferPolicy,
    pub cost: CostModel,
    pub options: PredictOptions,
}

impl Scenario {
    pub fn predict(&self) -> Result<Prediction, PerfError> {
        let plan = plan_for(&self.profile, &self.compressor, self.buffer)?;
        predict_iteration(
            &self.profile,
            &self.compressor,
            self.mode,
            &plan,
            &self.cost,
            &self.options,
        )
    }

    /// Mean over two consecutive iterations, which differ only for ACP-SGD.
    pub fn predict_pair(&self) -> Result<(Breakdown, f64), PerfError> {
        let plan = plan_for(&self.profile, &self.compressor, self.buffer)?;
        let mut sum = Breakdown::default();
        let mut launches = 0.0;
        for iteration in [self.options.iteration, self.options.iteration + 1] {
            let opts = PredictOptions {
                iteration,
                ..self.options
            };
            let p = predict_iteration(
                &self.profile,
                &self.compressor,
                self.mode,
                &plan,
                &self.cost,
                &opts,
            )?;
            sum.compute_s += p.breakdown.compute_s / 2.0;
            sum.compress_s += p.breakdown.compress_s / 2.0;
            sum.nonoverlapped_comm_s += p.breakdown.nonoverlapped_comm_s / 2.0;
            sum.iteration_s += p.breakdown.iteration_s / 2.0;
            launches += p.launches as f64 / 2.0;
        }
        Ok((sum, launches))
    }

    pub fn comm_volume(&self) -> Result<f64, PerfError> {
        let shapes = self.profile.shapes();
        let k: u64 = shapes
            .iter()
            .map(|s| self.compressor.topk_k(s.iter().product()) as u64)
            .sum();
        comm_volume(
            self.compressor.kind,
            self.profile.num_elements(),
            self.cost.p,
            k,
            self.compressor.rank,
            &shapes,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BufferSize,
    Rank,
    Workers,
    Alpha,
    Beta,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::BufferSize => "buffer-size",
            SweepAxis::Rank => "rank",
            SweepAxis::Workers => "workers",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = PerfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "buffer-size" | "buffer" => SweepAxis::BufferSize,
            "rank" => SweepAxis::Rank,
            "workers" => SweepAxis::Workers,
            "alpha" => SweepAxis::Alpha,
            "beta" => SweepAxis::Beta,
            other => return invalid(format!("unknown sweep axis {other:?}")),
        })
    }
}

/// One grid point. Times are two-iteration means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub iteration_s: f64,
    pub compute_s: f64,
    pub compress_s: f64,
    pub nonoverlapped_comm_s: f64,
    pub launches: f64,
    pub comm_volume_elements: f64,
}

/// Buffer sizes are bytes, with infinity meaning a single bucket.
pub fn sweep(base: &Scenario, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>, PerfError> {
    if values.is_empty() {
        return invalid("empty sweep grid");
    }
    values
        .iter()
        .map(|&v| {
            if v.is_nan() || v < 0.0 {
                return invalid(format!("sweep value {v} must be nonnegative"));
            }
            let mut s = base.clone();
            match axis {
                SweepAxis::BufferSize => {
                    s.mode = ScheduleMode::WfbpTf;
                    s.buffer = BufferPolicy::Fixed(if v.is_finite() { v as u64 } else { u64::MAX });
                }
                SweepAxis::Rank => s.compressor.rank = whole(v, "rank")?,
                SweepAxis::Workers => s.cost = s.cost.with_workers(whole(v, "workers")?),
                SweepAxis::Alpha => s.cost.alpha = v,
                SweepAxis::Beta => s.cost.beta = v,
            }
            let (b, launches) = s.predict_pair()?;
            Ok(SweepRow {
                axis: axis.label().into(),
                value: v,
                iteration_s: b.iteration_s,
                compute_s: b.compute_s,
                compress_s: b.compress_s,
                nonoverlapped_comm_s: b.nonoverlapped_comm_s,
                launches,
                comm_volume_elements: s.comm_volume()?,
            })
        })
        .collect()
}

fn whole(v: f64, what: &str) -> Result<usize, PerfError> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        invalid(format!("{what} must be a positive integer (got {v})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlap::MB;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn volume_examples() {
        let v = comm_volume(CompressorKind::Identity, 1_000_000, 8, 0, 0, &[]).unwrap();
        assert!(close(v, 1.75e6, 1e-6));
        let v = comm_volume(CompressorKind::TopkSampled, 1_000_000, 8, 1000, 0, &[]).unwrap();
        assert!(close(v, 1.4e4, 1e-9));
        let shapes = vec![vec![64, 32], vec![64], vec![10, 64]];
        for kind in CompressorKind::ALL {
            let v = comm_volume(kind, 2048 + 64 + 640, 1, 10, 4, &shapes).unwrap();
            assert_eq!(v, 0.0, "{kind}");
        }
        assert!(comm_volume(CompressorKind::TopkSampled, 10, 4, 0, 0, &[]).is_err());
        assert!(comm_volume(CompressorKind::PowerSgd, 10, 4, 0, 0, &shapes).is_err());
    }

    #[test]
    fn low_rank_volume_ratios() {
        let shapes = vec![vec![64, 32], vec![64], vec![10, 64], vec![10]];
        let n: u64 = 64 * 32 + 64 + 640 + 10;
        let nc = ((64 + 32) * 4 + (10 + 64) * 4) as f64;
        let s = comm_volume(CompressorKind::Identity, n, 8, 0, 4, &shapes).unwrap();
        let p = comm_volume(CompressorKind::PowerSgd, n, 8, 0, 4, &shapes).unwrap();
        let a = comm_volume(CompressorKind::AcpSgd, n, 8, 0, 4, &shapes).unwrap();
        assert_eq!(s / p, n as f64 / nc);
        assert_eq!(a * 2.0, p);
    }

    #[test]
    fn allreduce_example() {
        let cm = CostModel::new(10e-6, 1e-9, 4).unwrap();
        let t = allreduce_time(1048576.0, &cm);
        assert!(close(t, 60e-6 + 1.5 * 1048576.0 * 1e-9, 1e-12));
        assert!(close(t, 1.633e-3, 1e-6));
        assert!(close(allreduce_time(0.0, &cm), 60e-6, 1e-15));
        assert!(close(allgather_time(0.0, &cm), 30e-6, 1e-15));
    }

    #[test]
    fn fit_two_points() {
        let kb = 1024.0;
        let fit = fit_alpha_beta(&[(32.0 * kb, 1.0e-3), (64.0 * kb, 1.2e-3)], 8).unwrap();
        assert!(close(fit.intercept_s, 0.8e-3, 1e-12));
        assert!(close(fit.slope_s_per_byte, 0.2e-3 / (32.0 * kb), 1e-15));
        assert!(fit.rms_residual < 1e-12);
        let fused = fit.model.allreduce_time(64.0 * kb);
        let unfused = 2.0 * fit.model.allreduce_time(32.0 * kb);
        assert!(fused < unfused);
        assert!(close(unfused, 2.0e-3, 1e-9) && close(fused, 1.2e-3, 1e-9));
    }

    #[test]
    fn fit_round_trip_and_errors() {
        let cm = CostModel::new(7e-6, 3e-10, 6).unwrap();
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5, 1e6]
            .iter()
            .map(|&b| (b, cm.allreduce_time(b)))
            .collect();
        let fit = fit_alpha_beta(&pts, 6).unwrap();
        assert!(close(fit.model.alpha, cm.alpha, 1e-9));
        assert!(close(fit.model.beta, cm.beta, 1e-9));
        assert!(fit_alpha_beta(&[(10.0, 1.0), (10.0, 2.0)], 4).is_err());
        assert!(fit_alpha_beta(&[(10.0, 1.0)], 4).is_err());
        assert!(fit_alpha_beta(&[(10.0, 1.0), (20.0, 2.0)], 1).is_err());
    }

    fn toy() -> ModelProfile {
        let layer = |name: &str| LayerProfile {
            name: name.into(),
            ff_s: 0.0,
            bp_s: 4e-3,
            compress_s: 0.0,
            decode_s: 0.0,
            tensors: vec![vec![1000]],
        };
        ModelProfile {
            layers: vec![layer("layer1"), layer("layer2")],
        }
    }

    fn toy_prediction(mode: ScheduleMode) -> Prediction {
        let profile = toy();
        let cfg = CompressorConfig::new(CompressorKind::Identity);
        // one 4000-byte tensor takes 3 ms at p = 2
        let cm = CostModel::new(0.0, 3e-3 / 4000.0, 2).unwrap();
        let plan = plan_for(&profile, &cfg, BufferPolicy::Fixed(0)).unwrap();
        predict_iteration(&profile, &cfg, mode, &plan, &cm, &PredictOptions::default()).unwrap()
    }

    #[test]
    fn toy_schedules() {
        let naive = toy_prediction(ScheduleMode::Naive);
        assert!(
            close(naive.iteration_s, 14e-3, 1e-12),
            "{}",
            naive.iteration_s
        );
        let wfbp = toy_prediction(ScheduleMode::Wfbp);
        assert!(
            close(wfbp.iteration_s, 11e-3, 1e-12),
            "{}",
            wfbp.iteration_s
        );
        assert!(close(wfbp.breakdown.nonoverlapped_comm_s, 3e-3, 1e-12));
        assert_eq!(wfbp.launches, 2);
        assert_eq!(naive.launches, 1);
    }

    #[test]
    fn free_network_is_pure_compute() {
        let profile = ModelProfile::mlp(&[64, 128, 128, 10], 1e-8, 3e-9).unwrap();
        let total: f64 = profile
            .layers
            .iter()
            .map(|l| l.ff_s + l.bp_s + l.compress_s + l.decode_s)
            .sum();
        for kind in CompressorKind::ALL {
            let cfg = CompressorConfig::new(kind).with_rank(4);
            for mode in ScheduleMode::ALL {
                let s = Scenario {
                    profile: profile.clone(),
                    compressor: cfg.clone(),
                    mode,
                    buffer: BufferPolicy::Fixed(4096),
                    cost: CostModel::new(0.0, 0.0, 4).unwrap(),
                    options: PredictOptions {
                        interference: 1.0,
                        iteration: 0,
                    },
                };
                let p = s.predict().unwrap();
                assert!(
                    close(p.iteration_s, total, 1e-12),
                    "{kind} {mode}: {} vs {total}",
                    p.iteration_s
                );
            }
        }
    }

    #[test]
    fn power_sgd_q_waits_for_p() {
        let profile = ModelProfile::mlp(&[64, 128, 10], 1e-6, 1e-7).unwrap();
        let s = Scenario {
            profile,
            compressor: CompressorConfig::new(CompressorKind::PowerSgd).with_rank(4),
            mode: ScheduleMode::Wfbp,
            buffer: BufferPolicy::Fixed(0),
            cost: CostModel::reference(4),
            options: PredictOptions::default(),
        };
        let p = s.predict().unwrap();
        let ev = &p.timeline.events;
        for q in ev
            .iter()
            .filter(|e| e.kind == TaskKind::Compress && e.id.starts_with("Q:"))
        {
            let t = &q.id[2..];
            let agg = ev
                .iter()
                .find(|e| e.kind == TaskKind::Collective && e.id == format!("P:{t}"))
                .unwrap();
            assert!(q.start_s >= agg.end_s);
            let q_coll = ev
                .iter()
                .find(|e| e.kind == TaskKind::Collective && e.id == format!("Q:{t}"))
                .unwrap();
            assert!(q_coll.start_s >= q.end_s);
        }
    }

    #[test]
    fn acp_moves_half_of_power_sgd_factor_bytes() {
        let profile = ModelProfile::mlp(&[64, 128, 10], 1e-6, 1e-7).unwrap();
        let mut s = Scenario {
            profile,
            compressor: CompressorConfig::new(CompressorKind::PowerSgd).with_rank(4),
            mode: ScheduleMode::WfbpTf,
            buffer: BufferPolicy::Fixed(0),
            cost: CostModel::new(0.0, 1e-9, 4).unwrap(),
            options: PredictOptions::default(),
        };
        let factor_bytes = |p: &Prediction| -> u64 {
            p.timeline
                .events
                .iter()
                .filter(|e| e.kind == TaskKind::Collective && !e.id.starts_with("dense"))
                .map(|e| e.bytes)
                .sum()
        };
        let power = factor_bytes(&s.predict().unwrap());
        s.compressor.kind = CompressorKind::AcpSgd;
        let odd = factor_bytes(&s.predict().unwrap());
        s.options.iteration = 1;
        let even = factor_bytes(&s.predict().unwrap());
        assert_eq!(2 * (odd + even), 2 * power);
        assert!(odd > 0 && even > 0);
    }

    #[test]
    fn inconsistent_plan_is_rejected() {
        let profile = ModelProfile::mlp(&[8, 4, 2], 1e-6, 0.0).unwrap();
        let other = ModelProfile::mlp(&[8, 2], 1e-6, 0.0).unwrap();
        let cfg = CompressorConfig::new(CompressorKind::Identity);
        let plan = plan_for(&other, &cfg, BufferPolicy::Fixed(0)).unwrap();
        let r = predict_iteration(
            &profile,
            &cfg,
            ScheduleMode::WfbpTf,
            &plan,
            &CostModel::reference(2),
            &PredictOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn buffer_sweep_is_u_shaped_for_large_model() {
        let base = Scenario {
            profile: ModelProfile::bert_large_like(256),
            compressor: CompressorConfig::new(CompressorKind::AcpSgd).with_rank(256),
            mode: ScheduleMode::WfbpTf,
            buffer: BufferPolicy::Fixed(0),
            cost: CostModel::reference(32),
            options: PredictOptions::default(),
        };
        let grid = [
            0.0,
            1.0 * MB as f64,
            4.0 * MB as f64,
            16.0 * MB as f64,
            64.0 * MB as f64,
            f64::INFINITY,
        ];
        let rows = sweep(&base, SweepAxis::BufferSize, &grid).unwrap();
        let first = rows[0].iteration_s;
        let last = rows.last().unwrap().iteration_s;
        let best = rows[1..rows.len() - 1]
            .iter()
            .map(|r| r.iteration_s)
            .fold(f64::INFINITY, f64::min);
        assert!(
            best < first && best < last,
            "{:?}",
            rows.iter().map(|r| r.iteration_s).collect::<Vec<_>>()
        );
        let launches: Vec<f64> = rows.iter().map(|r| r.launches).collect();
        assert!(launches.windows(2).all(|w| w[1] <= w[0]), "{launches:?}");
    }

    #[test]
    fn rank_sweep_volume_is_monotone() {
        let base = Scenario {
            profile: ModelProfile::mlp(&[512, 512, 512, 10], 1e-9, 0.0).unwrap(),
            compressor: CompressorConfig::new(CompressorKind::PowerSgd),
            mode: ScheduleMode::WfbpTf,
            buffer: BufferPolicy::Compressed {
                default_bytes: 25 * MB,
            },
            cost: CostModel::reference(8),
            options: PredictOptions::default(),
        };
        let rows = sweep(&base, SweepAxis::Rank, &[32.0, 64.0, 128.0, 256.0]).unwrap();
        assert!(rows
            .windows(2)
            .all(|w| w[1].comm_volume_elements >= w[0].comm_volume_elements));
        assert!(sweep(&base, SweepAxis::Rank, &[]).is_err());
    }

    #[test]
    fn workers_sweep_approaches_twice_model_size() {
        let base = Scenario {
            profile: ModelProfile::mlp(&[100, 100, 10], 1e-9, 0.0).unwrap(),
            compressor: CompressorConfig::new(CompressorKind::Identity),
            mode: ScheduleMode::WfbpTf,
            buffer: BufferPolicy::Compressed {
                default_bytes: 25 * MB,
            },
            cost: CostModel::reference(2),
            options: PredictOptions::default(),
        };
        let n = base.profile.num_elements() as f64;
        let rows = sweep(&base, SweepAxis::Workers, &[2.0, 4.0, 8.0]).unwrap();
        let v: Vec<f64> = rows.iter().map(|r| r.comm_volume_elements).collect();
        assert!(v[0] < v[1] && v[1] < v[2] && v[2] < 2.0 * n);
        assert!(close(v[2], 1.75 * n, 1e-6));
    }

    #[test]
    fn profile_json_round_trip() {
        let p = ModelProfile::mlp(&[4, 3, 2], 1e-6, 1e-7).unwrap();
        assert_eq!(ModelProfile::from_json(&p.to_json().unwrap()).unwrap(), p);
        assert!(ModelProfile::from_json(r#"{"layers":[]}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn profile_strategy() -> impl Strategy<Value = ModelProfile> {
            prop::collection::vec((1usize..40, 1usize..40, 0.0f64..5e-3, 0.0f64..1e-3), 1..6)
                .prop_map(|layers| ModelProfile {
                    layers: layers
                        .into_iter()
                        .enumerate()
                        .map(|(i, (n, m, bp, c))| LayerProfile {
                            name: format!("l{i}"),
                            ff_s: bp / 2.0,
                            bp_s: bp,
                            compress_s: c,
                            decode_s: c / 4.0,
                            tensors: vec![vec![n, m], vec![n]],
                        })
                        .collect(),
                })
        }

        proptest! {
            // Holds without start-up cost; with alpha > 0 per-tensor
            // launches can cost more than the overlap saves.
            #[test]
            fn wfbp_never_slower_than_naive(
                profile in profile_strategy(),
                kind in prop::sample::select(CompressorKind::ALL.to_vec()),
                beta in 0.0f64..1e-7,
                p in 1usize..9,
            ) {
                let s = |mode| Scenario {
                    profile: profile.clone(),
                    compressor: CompressorConfig::new(kind).with_rank(2).with_topk_density(0.1),
                    mode,
                    buffer: BufferPolicy::Fixed(0),
                    cost: CostModel::new(0.0, beta, p).unwrap(),
                    options: PredictOptions { interference: 1.0, iteration: 0 },
                };
                let naive = s(ScheduleMode::Naive).predict().unwrap().iteration_s;
                let wfbp = s(ScheduleMode::Wfbp).predict().unwrap().iteration_s;
                prop_assert!(wfbp <= naive + 1e-12, "wfbp {} naive {}", wfbp, naive);
            }

            #[test]
            fn launches_do_not_grow_with_buffer(
                profile in profile_strategy(),
                kind in prop::sample::select(CompressorKind::ALL.to_vec()),
                a in 0u64..20_000,
                b in 0u64..20_000,
            ) {
                let (small, large) = (a.min(b), a.max(b));
                let s = |buf| Scenario {
                    profile: profile.clone(),
                    compressor: CompressorConfig::new(kind).with_rank(2).with_topk_density(0.1),
                    mode: ScheduleMode::WfbpTf,
                    buffer: BufferPolicy::Fixed(buf),
                    cost: CostModel::reference(4),
                    options: PredictOptions::default(),
                };
                let ls = s(small).predict().unwrap().launches;
                let ll = s(large).predict().unwrap().launches;
                prop_assert!(ll <= ls);
            }
        }
    }
}
