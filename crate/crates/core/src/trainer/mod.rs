//! Data-parallel training of small networks over the overlap engine.

pub mod data;
pub mod model;

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{CommError, Communicator, ReduceAlgo, Stream};
use crate::compressors::{CompressError, Compressor, CompressorConfig, CompressorKind};
use crate::overlap::{
    run_iteration, BufferPolicy, EngineError, EngineOptions, Event, GradientSource, LayerGrads,
    ScheduleMode, SchedulePlan, TaskKind, Timeline, DEFAULT_BUFFER_BYTES,
};
use crate::tensor::{Matrix, TensorError};
pub use data::{load_dataset, DataError, DataSource, Dataset, Split};
pub use model::{sgd_momentum_update, Activation, BatchSource, LossKind, Mlp, ModelSpec};

/// Average loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Per-element tolerance of the in-training error-feedback check.
pub const EF_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("non-finite gradient: {detail}")]
    NonFinite { detail: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("worker {rank} failed: {msg}")]
    Worker { rank: usize, msg: String },
}

impl TrainError {
    /// Whether the error means the optimization blew up, as opposed to a
    /// configuration or transport problem.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Divergence { .. } | TrainError::NonFinite { .. }
        )
    }

    pub fn is_transport(&self) -> bool {
        match self {
            TrainError::Comm(_) => true,
            TrainError::Engine(EngineError::Comm(_)) => true,
            TrainError::Engine(EngineError::Compress(CompressError::Comm(_))) => true,
            TrainError::Compress(CompressError::Comm(_)) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows per worker per step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub compressor: CompressorConfig,
    pub mode: ScheduleMode,
    pub buffer: BufferPolicy,
    pub world: usize,
    /// Shuffling seed.
    pub seed: u64,
    pub reduce: ReduceAlgo,
    /// Stop after this many steps in total.
    pub max_steps: Option<usize>,
    /// Verify error-feedback telescoping every this many steps.
    pub ef_check_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.1,
            momentum: 0.9,
            warmup_epochs: 5,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            compressor: CompressorConfig::new(CompressorKind::Identity),
            mode: ScheduleMode::WfbpTf,
            buffer: BufferPolicy::Compressed {
                default_bytes: DEFAULT_BUFFER_BYTES,
            },
            world: 1,
            seed: 0,
            reduce: ReduceAlgo::Ring,
            max_steps: None,
            ef_check_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be ≥ 1");
        }
        if self.world == 0 {
            return fail("workers must be ≥ 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("decay epochs must be strictly increasing");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return fail("decay factor must be > 0");
        }
        if self.ef_check_interval == Some(0) {
            return fail("error-feedback check interval must be ≥ 1");
        }
        if self.ef_check_interval.is_some()
            && !(self.compressor.error_feedback
                && matches!(
                    self.compressor.kind,
                    CompressorKind::TopkSampled | CompressorKind::PowerSgd | CompressorKind::AcpSgd
                ))
        {
            return fail(
                "error-feedback check needs Top-k, Power-SGD or ACP-SGD with error feedback",
            );
        }
        self.compressor.validate()?;
        Ok(())
    }
}

/// Linear warmup `base·(e+1)/warmup` for the first `warmup_epochs`, then
/// `base · factor^(decay epochs ≤ e)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over steps of the worker-averaged batch loss.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub worker: usize,
    pub stream: Stream,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wire_bytes_sent: u64,
    pub launches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelSpec,
    pub config: TrainConfig,
    pub steps: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// One row per worker and stream.
    pub traffic: Vec<TrafficRow>,
    #[serde(skip)]
    pub wall_seconds: f64,
    /// Last iteration of every worker.
    #[serde(skip)]
    pub timeline: Timeline,
    #[serde(skip)]
    pub params: Vec<Vec<f32>>,
}

impl TrainReport {
    pub fn total_bytes_sent(&self) -> u64 {
        self.traffic.iter().map(|r| r.bytes_sent).sum()
    }

    pub fn stream_bytes_sent(&self, stream: Stream) -> u64 {
        self.traffic
            .iter()
            .filter(|r| r.stream == stream)
            .map(|r| r.bytes_sent)
            .sum()
    }
}

/// Wraps a source and keeps a copy of every gradient it hands out.
struct Recording<'a, S> {
    inner: S,
    seen: &'a mut Vec<Vec<f32>>,
}

impl<S: GradientSource> GradientSource for Recording<'_, S> {
    fn shapes(&self) -> Vec<Vec<usize>> {
        self.inner.shapes()
    }

    fn ready_order(&self) -> Vec<usize> {
        self.inner.ready_order()
    }

    fn forward(&mut self) -> Result<f64, EngineError> {
        self.inner.forward()
    }

    fn backward_next(&mut self) -> Result<Option<LayerGrads>, EngineError> {
        let next = self.inner.backward_next()?;
        if let Some(layer) = &next {
            for (t, g) in &layer.grads {
                self.seen[*t] = g.clone();
            }
        }
        Ok(next)
    }
}

/// Running sums for the error-feedback identity
/// `mean_w E_w = mean_w Σ M_w − Σ decoded`.
struct EfTracker {
    local_sum: Vec<Vec<f64>>,
    decoded_sum: Vec<Vec<f64>>,
}

impl EfTracker {
    fn new(shapes: &[Vec<usize>]) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect()
        };
        Self {
            local_sum: zeros(),
            decoded_sum: zeros(),
        }
    }

    fn add(&mut self, raw: &[Vec<f32>], decoded: &[Vec<f32>]) {
        for (acc, g) in self.local_sum.iter_mut().zip(raw) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += f64::from(*v));
        }
        for (acc, g) in self.decoded_sum.iter_mut().zip(decoded) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += f64::from(*v));
        }
    }

    fn check(
        &self,
        compressor: &Compressor,
        comm: &mut Communicator,
        step: usize,
    ) -> Result<(), TrainError> {
        let world = comm.world_size() as f64;
        for t in 0..self.local_sum.len() {
            let Some(e) = compressor.error_feedback(t) else {
                continue;
            };
            let mut v: Vec<f32> = self.local_sum[t]
                .iter()
                .zip(&e)
                .map(|(m, e)| (m - f64::from(*e)) as f32)
                .collect();
            comm.control().all_reduce(&mut v, ReduceAlgo::Reference)?;
            for (i, (s, d)) in v.iter().zip(&self.decoded_sum[t]).enumerate() {
                let got = f64::from(*s) / world;
                let tol = EF_CHECK_TOLERANCE * d.abs().max(1.0);
                if (got - d).abs() > tol {
                    return Err(TrainError::Invariant(format!(
                        "error feedback does not telescope at step {step}, tensor {t}[{i}]: {got} vs {d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn batch(data: &Dataset, idx: &[usize]) -> Result<(Matrix, Vec<u32>), TrainError> {
    let mut x = Vec::with_capacity(idx.len() * data.dim);
    for &i in idx {
        x.extend_from_slice(data.row(i));
    }
    Ok((
        Matrix::new(idx.len(), data.dim, x)?,
        idx.iter().map(|&i| data.labels[i]).collect(),
    ))
}

fn check_shapes(spec: &ModelSpec, data: &Split) -> Result<(), TrainError> {
    spec.validate()?;
    if spec.widths[0] != data.train.dim {
        return Err(TrainError::Config(format!(
            "model input width {} does not match data dimension {}",
            spec.widths[0], data.train.dim
        )));
    }
    let out = *spec.widths.last().unwrap();
    if out < data.train.classes {
        return Err(TrainError::Config(format!(
            "model has {out} outputs for {} classes",
            data.train.classes
        )));
    }
    Ok(())
}

/// One worker's training loop. Every worker of the group must call this
/// with the same model, data and configuration.
pub fn train_worker(
    spec: &ModelSpec,
    data: &Split,
    cfg: &TrainConfig,
    comm: &mut Communicator,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_shapes(spec, data)?;
    if comm.world_size() != cfg.world {
        return Err(TrainError::Config(format!(
            "communicator spans {} workers, configuration asks for {}",
            comm.world_size(),
            cfg.world
        )));
    }
    let started = Instant::now();
    let (world, rank) = (cfg.world, comm.rank());
    let steps_per_epoch = data.train.len() / (world * cfg.batch_size);
    if steps_per_epoch == 0 {
        return Err(TrainError::Config(format!(
            "{} training rows cannot fill one global batch of {}",
            data.train.len(),
            world * cfg.batch_size
        )));
    }

    let mut model = Mlp::new(spec.clone())?;
    let shapes = spec.shapes();
    let mut compressor = Compressor::new(cfg.compressor.clone(), &shapes, world, rank)?;
    let ready = BatchSource::new(&model, Matrix::zeros(1, spec.widths[0]), vec![0]).ready_order();
    let plan = SchedulePlan::build(&compressor, &ready, cfg.buffer)?;
    let opts = EngineOptions::new(cfg.mode)
        .with_reduce(cfg.reduce)
        .with_origin(started);
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut tracker = cfg.ef_check_interval.map(|_| EfTracker::new(&shapes));
    let mut raw: Vec<Vec<f32>> = shapes.iter().map(|_| Vec::new()).collect();
    let mut last_timeline = Timeline::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let shards = data::epoch_shards(
            data.train.len(),
            cfg.batch_size,
            world,
            rank,
            cfg.seed,
            epoch,
        );
        let (mut loss_sum, mut steps) = (0f64, 0usize);
        for idx in shards {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                if steps > 0 {
                    epochs.push(finish_epoch(&model, data, epoch, lr, steps, loss_sum)?);
                }
                break 'epochs;
            }
            let (x, labels) = batch(&data.train, &idx)?;
            let out = {
                let source = BatchSource::new(&model, x, labels);
                let mut rec = Recording {
                    inner: source,
                    seen: &mut raw,
                };
                run_iteration(&mut rec, &mut compressor, comm, &plan, &opts)?
            };

            let mut loss = [out.loss as f32];
            comm.control().all_reduce(&mut loss, cfg.reduce)?;
            let loss = f64::from(loss[0]) / world as f64;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(TrainError::Divergence { epoch, loss });
            }
            loss_sum += loss;
            steps += 1;
            step += 1;

            if let Some(tr) = tracker.as_mut() {
                tr.add(&raw, &out.grads);
                if step % cfg.ef_check_interval.unwrap_or(1) == 0 {
                    tr.check(&compressor, comm, step)?;
                }
            }

            let update_start = started.elapsed().as_secs_f64();
            for (t, g) in out.grads.iter().enumerate() {
                sgd_momentum_update(
                    &mut model.params_mut()[t],
                    g,
                    lr as f32,
                    cfg.momentum as f32,
                    &mut velocity[t],
                )
                .map_err(|e| match e {
                    TrainError::NonFinite { detail } => TrainError::NonFinite {
                        detail: format!("epoch {epoch}, step {step}, tensor {t}: {detail}"),
                    },
                    other => other,
                })?;
            }
            last_timeline = out.timeline;
            last_timeline.push(Event {
                worker: rank,
                kind: TaskKind::Update,
                id: "sgd".into(),
                start_s: update_start,
                end_s: started.elapsed().as_secs_f64(),
                bytes: 0,
            });
        }
        epochs.push(finish_epoch(&model, data, epoch, lr, steps, loss_sum)?);
    }

    let traffic: Vec<TrafficRow> = Stream::ALL
        .iter()
        .map(|&s| {
            let t = comm.traffic(s);
            TrafficRow {
                worker: rank,
                stream: s,
                bytes_sent: t.bytes_sent,
                bytes_received: t.bytes_received,
                wire_bytes_sent: t.wire_bytes_sent,
                launches: t.launch_count,
            }
        })
        .collect();
    let traffic: Vec<TrafficRow> = gather_json(comm, &traffic)?.into_iter().flatten().collect();
    let timeline = Timeline {
        events: gather_json(comm, &last_timeline.events)?
            .into_iter()
            .flatten()
            .collect(),
    };
    let last = epochs
        .last()
        .cloned()
        .ok_or_else(|| TrainError::Config("no steps were run".into()))?;
    Ok(TrainReport {
        model: spec.clone(),
        config: cfg.clone(),
        steps: step,
        final_loss: last.train_loss,
        final_accuracy: last.eval_accuracy,
        epochs,
        traffic,
        wall_seconds: started.elapsed().as_secs_f64(),
        timeline,
        params: model.params().to_vec(),
    })
}

fn finish_epoch(
    model: &Mlp,
    data: &Split,
    epoch: usize,
    lr: f64,
    steps: usize,
    loss_sum: f64,
) -> Result<EpochMetrics, TrainError> {
    let (eval_loss, eval_accuracy) = model.evaluate(&data.test)?;
    Ok(EpochMetrics {
        epoch,
        lr,
        steps,
        train_loss: loss_sum / steps.max(1) as f64,
        eval_loss,
        eval_accuracy,
    })
}

fn gather_json<T: Serialize + serde::de::DeserializeOwned>(
    comm: &mut Communicator,
    value: &T,
) -> Result<Vec<T>, TrainError> {
    let bytes = serde_json::to_vec(value).map_err(|e| TrainError::Invariant(e.to_string()))?;
    comm.control()
        .all_gather(&bytes)?
        .iter()
        .map(|b| serde_json::from_slice(b).map_err(|e| TrainError::Invariant(e.to_string())))
        .collect()
}

/// Trains with `cfg.world` in-process workers and returns rank 0's report.
pub fn train(spec: &ModelSpec, data: &Split, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with_timeout(spec, data, cfg, None)
}

pub fn train_with_timeout(
    spec: &ModelSpec,
    data: &Split,
    cfg: &TrainConfig,
    timeout: Option<Duration>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_shapes(spec, data)?;
    let comms = Communicator::in_process(cfg.world);
    let results: Vec<Result<TrainReport, TrainError>> = thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                if let Some(t) = timeout {
                    comm.set_timeout(t);
                }
                s.spawn(move || train_worker(spec, data, cfg, &mut comm))
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(TrainError::Worker {
                        rank,
                        msg: "panicked".into(),
                    })
                })
            })
            .collect()
    });
    let mut first_err = None;
    let mut report = None;
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) if rank == 0 => report = Some(rep),
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => report.ok_or_else(|| TrainError::Worker {
            rank: 0,
            msg: "no report".into(),
        }),
    }
}
