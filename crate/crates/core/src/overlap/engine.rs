//! Live scheduler for one training iteration.
//!
//! Compute (forward, backward, encode, decode) runs on the calling thread.
//! Each stream gets its own communication thread, so collectives on one
//! stream never wait behind another stream's queue. Buckets are issued as
//! soon as their last tensor is encoded (or after backward in naive mode).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::bucket::SchedulePlan;
use super::timeline::{Event, TaskKind, Timeline};
use super::EngineError;
use crate::collectives::{CommError, Communicator, ProcessGroup, ReduceAlgo, Stream};
use crate::compressors::{Aggregated, Compressor, CompressorKind, Payload, Progress};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// All collectives after backward, one bucket per stream.
    #[serde(rename = "NAIVE")]
    Naive,
    /// One collective per tensor, issued as soon as it is ready.
    #[serde(rename = "WFBP")]
    Wfbp,
    /// Ready tensors fused into buckets from the plan.
    #[default]
    #[serde(rename = "WFBP_TF")]
    WfbpTf,
}

impl ScheduleMode {
    pub const ALL: [ScheduleMode; 3] = [
        ScheduleMode::Naive,
        ScheduleMode::Wfbp,
        ScheduleMode::WfbpTf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScheduleMode::Naive => "NAIVE",
            ScheduleMode::Wfbp => "WFBP",
            ScheduleMode::WfbpTf => "WFBP_TF",
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScheduleMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "NAIVE" => Ok(ScheduleMode::Naive),
            "WFBP" => Ok(ScheduleMode::Wfbp),
            "WFBP_TF" | "TF" => Ok(ScheduleMode::WfbpTf),
            _ => Err(EngineError::Plan(format!("unknown schedule mode {s:?}"))),
        }
    }
}

/// Gradients of one backward step.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub label: String,
    pub grads: Vec<(usize, Vec<f32>)>,
}

/// A model replica seen from the scheduler.
pub trait GradientSource {
    /// Parameter shapes indexed by tensor id.
    fn shapes(&self) -> Vec<Vec<usize>>;
    /// Tensor ids in the order backward produces their gradients.
    fn ready_order(&self) -> Vec<usize>;
    /// Runs the forward pass and returns the local loss.
    fn forward(&mut self) -> Result<f64, EngineError>;
    /// Next layer's gradients, or `None` once backward is complete.
    fn backward_next(&mut self) -> Result<Option<LayerGrads>, EngineError>;
}

#[derive(Clone, Copy, Debug)]
pub struct EngineOptions {
    pub mode: ScheduleMode,
    pub reduce: ReduceAlgo,
    /// Times in the timeline are measured from here.
    pub origin: Instant,
}

impl EngineOptions {
    pub fn new(mode: ScheduleMode) -> Self {
        Self {
            mode,
            reduce: ReduceAlgo::Ring,
            origin: Instant::now(),
        }
    }

    pub fn with_reduce(mut self, reduce: ReduceAlgo) -> Self {
        self.reduce = reduce;
        self
    }

    pub fn with_origin(mut self, origin: Instant) -> Self {
        self.origin = origin;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectiveLaunch {
    pub stream: Stream,
    pub tensors: Vec<usize>,
    pub bytes: usize,
    /// 1 for collectives that depend only on local work, one more than
    /// the deepest collective they wait on otherwise.
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub loss: f64,
    /// Decoded global gradient per tensor id.
    pub grads: Vec<Vec<f32>>,
    pub timeline: Timeline,
    /// In issue order per stream.
    pub launches: Vec<CollectiveLaunch>,
}

impl IterationOutput {
    pub fn max_dependency_depth(&self) -> usize {
        self.launches.iter().map(|l| l.depth).max().unwrap_or(0)
    }

    pub fn launch_count(&self, stream: Stream) -> usize {
        self.launches.iter().filter(|l| l.stream == stream).count()
    }
}

enum JobResult {
    Sum(Vec<f32>),
    Gathered(Vec<Vec<u8>>),
}

struct Job {
    id: usize,
    payload: Payload,
}

struct Finished {
    id: usize,
    result: Result<JobResult, CommError>,
    start: f64,
    end: f64,
    bytes: u64,
}

fn comm_loop(
    group: &mut ProcessGroup,
    reduce: ReduceAlgo,
    origin: Instant,
    jobs: Receiver<Job>,
    done: Sender<Finished>,
) {
    for job in jobs {
        let before = group.bytes_sent();
        let start = origin.elapsed().as_secs_f64();
        let result = match job.payload {
            Payload::Dense(mut v) => group.all_reduce(&mut v, reduce).map(|_| JobResult::Sum(v)),
            Payload::Bytes(b) => group.all_gather(&b).map(JobResult::Gathered),
        };
        let failed = result.is_err();
        let finished = Finished {
            id: job.id,
            result,
            start,
            end: origin.elapsed().as_secs_f64(),
            bytes: group.bytes_sent() - before,
        };
        if done.send(finished).is_err() || failed {
            break;
        }
    }
}

/// Collects encoded tensors into this round's buckets for one stream.
struct Assembler {
    stream: Stream,
    buckets: Vec<Vec<usize>>,
    home: HashMap<usize, usize>,
    filled: Vec<HashMap<usize, Payload>>,
    issued: Vec<bool>,
}

impl Assembler {
    fn new(stream: Stream, buckets: Vec<Vec<usize>>) -> Self {
        let home = buckets
            .iter()
            .enumerate()
            .flat_map(|(b, ts)| ts.iter().map(move |&t| (t, b)))
            .collect();
        let filled = buckets.iter().map(|_| HashMap::new()).collect();
        let issued = vec![false; buckets.len()];
        Self {
            stream,
            buckets,
            home,
            filled,
            issued,
        }
    }

    /// Returns the bucket index when this payload completes it.
    fn add(&mut self, tensor: usize, payload: Payload) -> Result<Option<usize>, EngineError> {
        let &b = self.home.get(&tensor).ok_or_else(|| {
            EngineError::Plan(format!(
                "tensor {tensor} has no bucket on stream {}",
                self.stream
            ))
        })?;
        if self.filled[b].insert(tensor, payload).is_some() {
            return Err(EngineError::Plan(format!("tensor {tensor} encoded twice")));
        }
        Ok((self.filled[b].len() == self.buckets[b].len()).then_some(b))
    }

    /// Concatenated payload in bucket order, with per-tensor lengths.
    fn take(&mut self, b: usize) -> Result<(Vec<(usize, usize)>, Payload), EngineError> {
        self.issued[b] = true;
        let mut parts = Vec::with_capacity(self.buckets[b].len());
        let mut dense: Option<Vec<f32>> = None;
        let mut bytes: Option<Vec<u8>> = None;
        for &t in &self.buckets[b] {
            let p = self.filled[b]
                .remove(&t)
                .ok_or_else(|| EngineError::Plan(format!("tensor {t} missing from bucket")))?;
            match p {
                Payload::Dense(v) if bytes.is_none() => {
                    parts.push((t, v.len()));
                    dense.get_or_insert_with(Vec::new).extend(v);
                }
                Payload::Bytes(v) if dense.is_none() => {
                    parts.push((t, v.len()));
                    bytes.get_or_insert_with(Vec::new).extend(v);
                }
                _ => {
                    return Err(EngineError::Plan(
                        "bucket mixes dense and byte payloads".into(),
                    ))
                }
            }
        }
        let payload = match (dense, bytes) {
            (Some(d), None) => Payload::Dense(d),
            (None, Some(b)) => Payload::Bytes(b),
            _ => return Err(EngineError::Plan("empty bucket".into())),
        };
        Ok((parts, payload))
    }

    fn complete(&self) -> bool {
        self.issued.iter().all(|&i| i)
    }
}

fn split(
    result: JobResult,
    parts: &[(usize, usize)],
) -> Result<Vec<(usize, Aggregated)>, EngineError> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    match result {
        JobResult::Sum(v) => {
            if v.len() != total {
                return Err(EngineError::Plan(format!(
                    "reduced {} elements, expected {total}",
                    v.len()
                )));
            }
            let mut off = 0;
            Ok(parts
                .iter()
                .map(|&(t, n)| {
                    let s = v[off..off + n].to_vec();
                    off += n;
                    (t, Aggregated::Sum(s))
                })
                .collect())
        }
        JobResult::Gathered(ranks) => {
            if let Some(bad) = ranks.iter().find(|r| r.len() != total) {
                return Err(EngineError::Plan(format!(
                    "gathered {} bytes from a peer, expected {total}",
                    bad.len()
                )));
            }
            let mut off = 0;
            Ok(parts
                .iter()
                .map(|&(t, n)| {
                    let per_rank = ranks.iter().map(|r| r[off..off + n].to_vec()).collect();
                    off += n;
                    (t, Aggregated::Gathered(per_rank))
                })
                .collect())
        }
    }
}

struct InFlight {
    stream: Stream,
    label: String,
    parts: Vec<(usize, usize)>,
    depth: usize,
}

struct Scheduler<'a> {
    compressor: &'a mut Compressor,
    mode: ScheduleMode,
    origin: Instant,
    worker: usize,
    assemblers: HashMap<Stream, Assembler>,
    senders: HashMap<Stream, Sender<Job>>,
    held: Vec<(Stream, usize)>,
    backward_done: bool,
    in_flight: HashMap<usize, InFlight>,
    next_job: usize,
    tensor_depth: Vec<usize>,
    to_decode: Vec<(String, Vec<(usize, Aggregated)>)>,
    timeline: Timeline,
    launches: Vec<CollectiveLaunch>,
}

impl Scheduler<'_> {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn record(&mut self, kind: TaskKind, id: String, start: f64, end: f64, bytes: u64) {
        self.timeline.push(Event {
            worker: self.worker,
            kind,
            id,
            start_s: start,
            end_s: end,
            bytes,
        });
    }

    fn deliver(
        &mut self,
        stream: Stream,
        tensor: usize,
        payload: Payload,
    ) -> Result<(), EngineError> {
        let asm = self
            .assemblers
            .get_mut(&stream)
            .ok_or_else(|| EngineError::Plan(format!("no buckets for stream {stream}")))?;
        if let Some(b) = asm.add(tensor, payload)? {
            if self.mode == ScheduleMode::Naive && !self.backward_done {
                self.held.push((stream, b));
            } else {
                self.issue(stream, b)?;
            }
        }
        Ok(())
    }

    fn issue(&mut self, stream: Stream, bucket: usize) -> Result<(), EngineError> {
        let asm = self.assemblers.get_mut(&stream).expect("assembler exists");
        let (parts, payload) = asm.take(bucket)?;
        let depth = 1 + parts
            .iter()
            .map(|&(t, _)| self.tensor_depth[t])
            .max()
            .unwrap_or(0);
        let id = self.next_job;
        self.next_job += 1;
        self.launches.push(CollectiveLaunch {
            stream,
            tensors: parts.iter().map(|p| p.0).collect(),
            bytes: payload.byte_len(),
            depth,
        });
        let label = format!(
            "{}:{}",
            stream.label(),
            parts
                .iter()
                .map(|p| p.0.to_string())
                .collect::<Vec<_>>()
                .join("+")
        );
        self.in_flight.insert(
            id,
            InFlight {
                stream,
                label,
                parts,
                depth,
            },
        );
        self.senders[&stream]
            .send(Job { id, payload })
            .map_err(|_| {
                EngineError::Comm(CommError::Protocol(format!(
                    "{stream} stream thread exited"
                )))
            })
    }

    fn handle(&mut self, fin: Finished) -> Result<(), EngineError> {
        let job = self
            .in_flight
            .remove(&fin.id)
            .ok_or_else(|| EngineError::Plan(format!("unknown collective {}", fin.id)))?;
        self.record(
            TaskKind::Collective,
            job.label.clone(),
            fin.start,
            fin.end,
            fin.bytes,
        );
        let aggregated = split(fin.result?, &job.parts)?;
        let second_round =
            self.compressor.kind() == CompressorKind::PowerSgd && job.stream == Stream::P;
        if !second_round {
            self.to_decode.push((job.label, aggregated));
            return Ok(());
        }
        for (t, agg) in aggregated {
            let start = self.now();
            let progress = self.compressor.absorb(t, agg)?;
            self.record(TaskKind::Compress, format!("Q:{t}"), start, self.now(), 0);
            match progress {
                Progress::Next { stream, payload } => {
                    self.tensor_depth[t] = job.depth;
                    self.deliver(stream, t, payload)?;
                }
                Progress::Done(_) => {
                    return Err(EngineError::Plan(format!(
                        "tensor {t} finished after its first round"
                    )))
                }
            }
        }
        Ok(())
    }

    fn poll(&mut self, done: &Receiver<Finished>) -> Result<(), EngineError> {
        loop {
            match done.try_recv() {
                Ok(fin) => self.handle(fin)?,
                Err(TryRecvError::Empty) => return Ok(()),
                Err(TryRecvError::Disconnected) => return self.lost(),
            }
        }
    }

    fn lost(&self) -> Result<(), EngineError> {
        if self.in_flight.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Comm(CommError::Protocol(
                "communication threads exited early".into(),
            )))
        }
    }
}

/// Bucket layout of this iteration's round on each stream.
fn round_layout(
    compressor: &Compressor,
    plan: &SchedulePlan,
    mode: ScheduleMode,
    ready_order: &[usize],
) -> Result<HashMap<Stream, Vec<Vec<usize>>>, EngineError> {
    let mut active: HashMap<Stream, Vec<usize>> = HashMap::new();
    for &t in ready_order {
        for s in compressor.rounds(t) {
            active.entry(s).or_default().push(t);
        }
    }
    let mut layout = HashMap::new();
    for (stream, tensors) in active {
        let buckets = match mode {
            ScheduleMode::Naive => vec![tensors],
            ScheduleMode::Wfbp => tensors.into_iter().map(|t| vec![t]).collect(),
            ScheduleMode::WfbpTf => {
                let bp = plan.stream(stream).ok_or_else(|| {
                    EngineError::Plan(format!("plan has no buckets for stream {stream}"))
                })?;
                let on: std::collections::HashSet<usize> = tensors.iter().copied().collect();
                let buckets: Vec<Vec<usize>> = bp
                    .buckets
                    .iter()
                    .map(|b| b.tensors().filter(|t| on.contains(t)).collect::<Vec<_>>())
                    .filter(|b| !b.is_empty())
                    .collect();
                let covered: usize = buckets.iter().map(Vec::len).sum();
                if covered != tensors.len() {
                    return Err(EngineError::Plan(format!(
                        "plan for stream {stream} covers {covered} of {} tensors",
                        tensors.len()
                    )));
                }
                buckets
            }
        };
        layout.insert(stream, buckets);
    }
    Ok(layout)
}

/// Runs forward, backward and gradient aggregation for one iteration and
/// returns the decoded global gradients. The compressor advances to the
/// next iteration on success.
pub fn run_iteration(
    source: &mut dyn GradientSource,
    compressor: &mut Compressor,
    comm: &mut Communicator,
    plan: &SchedulePlan,
    opts: &EngineOptions,
) -> Result<IterationOutput, EngineError> {
    let n = compressor.num_tensors();
    let ready_order = source.ready_order();
    if ready_order.len() != n {
        return Err(EngineError::Plan(format!(
            "source reports {} tensors, compressor has {n}",
            ready_order.len()
        )));
    }
    let layout = round_layout(compressor, plan, opts.mode, &ready_order)?;
    let worker = comm.rank();
    let origin = opts.origin;
    let reduce = opts.reduce;

    let (done_tx, done_rx) = mpsc::channel::<Finished>();
    let mut output = thread::scope(|scope| -> Result<IterationOutput, EngineError> {
        let mut senders = HashMap::new();
        for (group, stream) in comm.streams_mut().iter_mut().zip(Stream::ALL) {
            if !layout.contains_key(&stream) {
                continue;
            }
            let (tx, rx) = mpsc::channel::<Job>();
            let done = done_tx.clone();
            senders.insert(stream, tx);
            scope.spawn(move || comm_loop(group, reduce, origin, rx, done));
        }
        drop(done_tx);

        let assemblers = layout
            .iter()
            .map(|(&s, b)| (s, Assembler::new(s, b.clone())))
            .collect();
        let mut sched = Scheduler {
            compressor,
            mode: opts.mode,
            origin,
            worker,
            assemblers,
            senders,
            held: Vec::new(),
            backward_done: false,
            in_flight: HashMap::new(),
            next_job: 0,
            tensor_depth: vec![0; n],
            to_decode: Vec::new(),
            timeline: Timeline::new(),
            launches: Vec::new(),
        };
        let result = drive(&mut sched, source, &done_rx, n);
        // closing the job queues lets the comm threads finish
        sched.senders.clear();
        result
    })?;
    output
        .timeline
        .events
        .sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(output)
}

fn drive(
    sched: &mut Scheduler<'_>,
    source: &mut dyn GradientSource,
    done: &Receiver<Finished>,
    n: usize,
) -> Result<IterationOutput, EngineError> {
    let start = sched.now();
    let loss = source.forward()?;
    sched.record(TaskKind::Ff, "forward".into(), start, sched.now(), 0);

    loop {
        let start = sched.now();
        let Some(layer) = source.backward_next()? else {
            break;
        };
        sched.record(TaskKind::Bp, layer.label, start, sched.now(), 0);
        for (t, grad) in layer.grads {
            if t >= n {
                return Err(EngineError::Plan(format!(
                    "source produced unknown tensor {t}"
                )));
            }
            let stream = sched.compressor.stream(t);
            let start = sched.now();
            let payload = sched.compressor.encode(t, &grad)?;
            sched.record(TaskKind::Compress, format!("{t}"), start, sched.now(), 0);
            sched.deliver(stream, t, payload)?;
        }
        sched.poll(done)?;
    }
    sched.backward_done = true;
    for (stream, b) in std::mem::take(&mut sched.held) {
        sched.issue(stream, b)?;
    }
    while !sched.in_flight.is_empty() {
        match done.recv_timeout(Duration::from_millis(50)) {
            Ok(fin) => sched.handle(fin)?,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => sched.lost()?,
        }
    }
    if let Some(asm) = sched.assemblers.values().find(|a| !a.complete()) {
        return Err(EngineError::Plan(format!(
            "stream {} has unissued tensors",
            asm.stream
        )));
    }

    let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
    for (label, parts) in std::mem::take(&mut sched.to_decode) {
        let start = sched.now();
        for (t, agg) in parts {
            match sched.compressor.absorb(t, agg)? {
                Progress::Done(g) => grads[t] = Some(g),
                Progress::Next { .. } => {
                    return Err(EngineError::Plan(format!(
                        "tensor {t} asked for an extra round"
                    )))
                }
            }
        }
        sched.record(TaskKind::Decode, label, start, sched.now(), 0);
    }
    let grads = grads
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            g.ok_or_else(|| EngineError::Plan(format!("tensor {t} received no gradient")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    sched.compressor.end_iteration();
    Ok(IterationOutput {
        loss,
        grads,
        timeline: std::mem::take(&mut sched.timeline),
        launches: std::mem::take(&mut sched.launches),
    })
}

/// Fixed gradients delivered layer by layer, with optional simulated
/// compute time. Useful for benchmarks and tests.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    shapes: Vec<Vec<usize>>,
    /// Tensor ids per layer, in backward order.
    layers: Vec<Vec<usize>>,
    grads: Vec<Vec<f32>>,
    forward_time: Duration,
    layer_time: Duration,
    cursor: usize,
}

impl SyntheticSource {
    pub fn new(
        shapes: Vec<Vec<usize>>,
        layers: Vec<Vec<usize>>,
        grads: Vec<Vec<f32>>,
    ) -> Result<Self, EngineError> {
        if grads.len() != shapes.len() {
            return Err(EngineError::Plan("one gradient per shape required".into()));
        }
        for (t, (g, s)) in grads.iter().zip(&shapes).enumerate() {
            if g.len() != s.iter().product::<usize>() {
                return Err(EngineError::Plan(format!(
                    "gradient {t} does not match its shape"
                )));
            }
        }
        let mut seen: Vec<usize> = layers.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen != (0..shapes.len()).collect::<Vec<_>>() {
            return Err(EngineError::Plan(
                "layers must list every tensor once".into(),
            ));
        }
        Ok(Self {
            shapes,
            layers,
            grads,
            forward_time: Duration::ZERO,
            layer_time: Duration::ZERO,
            cursor: 0,
        })
    }

    pub fn with_compute(mut self, forward: Duration, per_layer: Duration) -> Self {
        self.forward_time = forward;
        self.layer_time = per_layer;
        self
    }

    pub fn set_grads(&mut self, grads: Vec<Vec<f32>>) {
        assert_eq!(grads.len(), self.grads.len());
        self.grads = grads;
    }
}

fn busy_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    let until = Instant::now() + d;
    while Instant::now() < until {
        std::hint::spin_loop();
    }
}

impl GradientSource for SyntheticSource {
    fn shapes(&self) -> Vec<Vec<usize>> {
        self.shapes.clone()
    }

    fn ready_order(&self) -> Vec<usize> {
        self.layers.iter().flatten().copied().collect()
    }

    fn forward(&mut self) -> Result<f64, EngineError> {
        self.cursor = 0;
        busy_wait(self.forward_time);
        Ok(0.0)
    }

    fn backward_next(&mut self) -> Result<Option<LayerGrads>, EngineError> {
        let Some(layer) = self.layers.get(self.cursor) else {
            return Ok(None);
        };
        busy_wait(self.layer_time);
        let out = LayerGrads {
            label: format!("layer{}", self.layers.len() - 1 - self.cursor),
            grads: layer.iter().map(|&t| (t, self.grads[t].clone())).collect(),
        };
        self.cursor += 1;
        Ok(Some(out))
    }
}
