//! Gradient aggregation strategies behind one per-tensor contract:
//! encode the local gradient, aggregate through a collective, decode the
//! global gradient.
//!
//! [`Compressor`] owns the per-tensor state for a whole model. The overlap
//! engine drives it: [`Compressor::encode`] yields a [`Payload`] tagged with
//! the [`Stream`] it travels on, and [`Compressor::absorb`] consumes the
//! aggregated result, either finishing the tensor or (Power-SGD) asking for
//! a second round.

pub mod lowrank;
pub mod sign;
pub mod topk;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{CommError, Stream};
use crate::tensor::{derive_seed, reshape_to_matrix, Matrix, ShapePolicy, TensorError};
pub use lowrank::{acpsgd_step, powersgd_step, FactorSide, LowRankOptions, LowRankState};
pub use sign::{sign_encode, sign_majority_decode, SignPayload};
pub use topk::{topk_decode, topk_encode, SparsePayload};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorKind {
    /// Plain S-SGD: dense all-reduce of the raw gradient.
    Identity,
    SignMajority,
    TopkSampled,
    PowerSgd,
    AcpSgd,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 5] = [
        CompressorKind::Identity,
        CompressorKind::SignMajority,
        CompressorKind::TopkSampled,
        CompressorKind::PowerSgd,
        CompressorKind::AcpSgd,
    ];

    /// Aggregation is an element-wise sum of equal-shaped payloads, so it
    /// can use all-reduce.
    pub fn additive(self) -> bool {
        matches!(self, Self::Identity | Self::PowerSgd | Self::AcpSgd)
    }

    /// No collective depends on another collective of the same iteration.
    pub fn non_blocking(self) -> bool {
        !matches!(self, Self::PowerSgd)
    }

    pub fn default_error_feedback(self) -> bool {
        matches!(self, Self::TopkSampled | Self::PowerSgd | Self::AcpSgd)
    }

    pub fn is_low_rank(self) -> bool {
        matches!(self, Self::PowerSgd | Self::AcpSgd)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Self::Identity => "ssgd",
            Self::SignMajority => "sign",
            Self::TopkSampled => "topk",
            Self::PowerSgd => "powersgd",
            Self::AcpSgd => "acpsgd",
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for CompressorKind {
    type Err = CompressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ssgd" | "identity" | "s-sgd" => Self::Identity,
            "sign" | "signsgd" | "sign-majority" => Self::SignMajority,
            "topk" | "top-k" | "topk-sampled" => Self::TopkSampled,
            "powersgd" | "power-sgd" => Self::PowerSgd,
            "acpsgd" | "acp-sgd" | "acpsgd-ef" => Self::AcpSgd,
            other => return Err(CompressError::Config(format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    /// Target rank for low-rank methods; clamped to `min(n, m)` per layer.
    pub rank: usize,
    /// Fraction of each tensor's entries that Top-k keeps.
    pub topk_density: f64,
    pub topk_sample_fraction: f64,
    pub topk_max_rounds: u32,
    pub error_feedback: bool,
    pub reuse: bool,
    pub seed: u64,
}

impl CompressorConfig {
    pub fn new(kind: CompressorKind) -> Self {
        Self {
            kind,
            rank: 4,
            topk_density: 0.01,
            topk_sample_fraction: 0.01,
            topk_max_rounds: topk::DEFAULT_MAX_ROUNDS,
            error_feedback: kind.default_error_feedback(),
            reuse: true,
            seed: 0,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_error_feedback(mut self, on: bool) -> Self {
        self.error_feedback = on;
        self
    }

    pub fn with_reuse(mut self, on: bool) -> Self {
        self.reuse = on;
        self
    }

    pub fn with_topk_density(mut self, density: f64) -> Self {
        self.topk_density = density;
        self
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        if self.kind.is_low_rank() && self.rank == 0 {
            return Err(CompressError::Config("rank must be ≥ 1".into()));
        }
        if self.kind == CompressorKind::TopkSampled {
            if !(self.topk_density > 0.0 && self.topk_density <= 1.0) {
                return Err(CompressError::Config(
                    "top-k density must be in (0, 1]".into(),
                ));
            }
            if !(self.topk_sample_fraction > 0.0 && self.topk_sample_fraction <= 1.0) {
                return Err(CompressError::Config(
                    "sample fraction must be in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn topk_k(&self, numel: usize) -> usize {
        ((self.topk_density * numel as f64).ceil() as usize).clamp(1, numel)
    }
}

/// Local contribution of one tensor to a collective.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Summed with all-reduce.
    Dense(Vec<f32>),
    /// Exchanged with all-gather.
    Bytes(Vec<u8>),
}

impl Payload {
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Dense(v) => 4 * v.len(),
            Payload::Bytes(b) => b.len(),
        }
    }
}

/// Result of a collective for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregated {
    Sum(Vec<f32>),
    /// One payload per rank, in rank order.
    Gathered(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Progress {
    /// Global gradient, flattened in the tensor's row-major layout.
    Done(Vec<f32>),
    /// Another collective is needed before decoding.
    Next { stream: Stream, payload: Payload },
}

#[derive(Clone, Debug)]
enum TensorState {
    Dense,
    Sign { error: Option<Vec<f32>> },
    Topk { k: usize, error: Option<Vec<f32>> },
    Power(LowRankState),
    Acp(LowRankState),
}

#[derive(Clone, Debug)]
struct Slot {
    policy: ShapePolicy,
    state: TensorState,
}

/// Compression state for every tensor of one worker's model replica.
#[derive(Clone, Debug)]
pub struct Compressor {
    cfg: CompressorConfig,
    world: usize,
    rank: usize,
    iteration: u64,
    slots: Vec<Slot>,
}

impl Compressor {
    /// `shapes` lists every parameter tensor; tensor ids used by the other
    /// methods index into it. `rank` is this worker's rank (it only seeds
    /// Top-k sampling).
    pub fn new(
        cfg: CompressorConfig,
        shapes: &[Vec<usize>],
        world: usize,
        rank: usize,
    ) -> Result<Self, CompressError> {
        cfg.validate()?;
        if world == 0 || rank >= world {
            return Err(CompressError::Config(format!(
                "rank {rank} outside world {world}"
            )));
        }
        let opts = LowRankOptions {
            error_feedback: cfg.error_feedback,
            reuse: cfg.reuse,
        };
        let slots = shapes
            .iter()
            .enumerate()
            .map(|(id, shape)| {
                let policy = reshape_to_matrix(shape)?;
                let n = policy.numel();
                let ef = || cfg.error_feedback.then(|| vec![0.0; n]);
                let state = match cfg.kind {
                    CompressorKind::Identity => TensorState::Dense,
                    CompressorKind::SignMajority => TensorState::Sign { error: ef() },
                    CompressorKind::TopkSampled => TensorState::Topk {
                        k: cfg.topk_k(n),
                        error: ef(),
                    },
                    CompressorKind::PowerSgd | CompressorKind::AcpSgd if policy.compressible => {
                        let r = cfg.rank.min(policy.max_rank());
                        let seed = derive_seed(cfg.seed, &[id as u64]);
                        let st = LowRankState::new(policy.rows, policy.cols, r, seed, opts)?;
                        if cfg.kind == CompressorKind::PowerSgd {
                            TensorState::Power(st)
                        } else {
                            TensorState::Acp(st)
                        }
                    }
                    _ => TensorState::Dense,
                };
                Ok(Slot { policy, state })
            })
            .collect::<Result<Vec<_>, CompressError>>()?;
        Ok(Self {
            cfg,
            world,
            rank,
            iteration: 0,
            slots,
        })
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.cfg
    }

    pub fn kind(&self) -> CompressorKind {
        self.cfg.kind
    }

    pub fn world_size(&self) -> usize {
        self.world
    }

    pub fn num_tensors(&self) -> usize {
        self.slots.len()
    }

    pub fn policy(&self, tensor: usize) -> &ShapePolicy {
        &self.slots[tensor].policy
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Whether the tensor goes through a low-rank factorization.
    pub fn is_factorized(&self, tensor: usize) -> bool {
        matches!(
            self.slots[tensor].state,
            TensorState::Power(_) | TensorState::Acp(_)
        )
    }

    /// Effective rank used for a tensor, if factorized.
    pub fn tensor_rank(&self, tensor: usize) -> Option<usize> {
        match &self.slots[tensor].state {
            TensorState::Power(s) | TensorState::Acp(s) => Some(s.rank()),
            _ => None,
        }
    }

    pub fn low_rank_state(&self, tensor: usize) -> Option<&LowRankState> {
        match &self.slots[tensor].state {
            TensorState::Power(s) | TensorState::Acp(s) => Some(s),
            _ => None,
        }
    }

    /// Local error-feedback memory, if the tensor keeps one.
    pub fn error_feedback(&self, tensor: usize) -> Option<Vec<f32>> {
        match &self.slots[tensor].state {
            TensorState::Sign { error } | TensorState::Topk { error, .. } => error.clone(),
            TensorState::Power(s) | TensorState::Acp(s) if s.options().error_feedback => {
                Some(s.error().data().to_vec())
            }
            _ => None,
        }
    }

    /// Stream carrying the tensor's first collective this iteration.
    pub fn stream(&self, tensor: usize) -> Stream {
        match &self.slots[tensor].state {
            TensorState::Power(_) => Stream::P,
            TensorState::Acp(s) => match s.acp_side() {
                FactorSide::P => Stream::P,
                FactorSide::Q => Stream::Q,
            },
            _ => Stream::Dense,
        }
    }

    /// Streams a tensor may use this iteration, in order.
    pub fn rounds(&self, tensor: usize) -> Vec<Stream> {
        match &self.slots[tensor].state {
            TensorState::Power(_) => vec![Stream::P, Stream::Q],
            _ => vec![self.stream(tensor)],
        }
    }

    /// Bytes the tensor contributes to a collective on `stream`.
    pub fn payload_bytes(&self, tensor: usize, stream: Stream) -> usize {
        let slot = &self.slots[tensor];
        let n = slot.policy.numel();
        match (&slot.state, stream) {
            (TensorState::Sign { .. }, _) => SignPayload::byte_len(n),
            (TensorState::Topk { k, .. }, _) => SparsePayload::byte_len(*k),
            (TensorState::Power(s) | TensorState::Acp(s), Stream::P) => 4 * s.rows() * s.rank(),
            (TensorState::Power(s) | TensorState::Acp(s), Stream::Q) => 4 * s.cols() * s.rank(),
            _ => 4 * n,
        }
    }

    /// Uncompressed-to-compressed byte ratio for a stream, over the tensors
    /// that use it in either parity of the iteration. `None` when no tensor
    /// uses the stream.
    pub fn stream_compression_rate(&self, stream: Stream) -> Option<f64> {
        let (mut raw, mut packed) = (0usize, 0usize);
        for (id, slot) in self.slots.iter().enumerate() {
            let uses = match &slot.state {
                TensorState::Power(_) | TensorState::Acp(_) => stream != Stream::Dense,
                _ => stream == Stream::Dense,
            };
            if uses {
                raw += 4 * slot.policy.numel();
                packed += self.payload_bytes(id, stream);
            }
        }
        (raw > 0).then(|| packed as f64 / raw as f64)
    }

    pub fn encode(&mut self, tensor: usize, grad: &[f32]) -> Result<Payload, CompressError> {
        let seed = derive_seed(
            self.cfg.seed,
            &[0x70b, tensor as u64, self.iteration, self.rank as u64],
        );
        let cfg = &self.cfg;
        let slot = &mut self.slots[tensor];
        let n = slot.policy.numel();
        if grad.len() != n {
            return Err(CompressError::Mismatch(format!(
                "tensor {tensor}: gradient has {} elements, expected {n}",
                grad.len()
            )));
        }
        let mixed = |error: &Option<Vec<f32>>| -> Vec<f32> {
            match error {
                Some(e) => grad.iter().zip(e).map(|(g, e)| g + e).collect(),
                None => grad.to_vec(),
            }
        };
        Ok(match &mut slot.state {
            TensorState::Dense => Payload::Dense(grad.to_vec()),
            TensorState::Sign { error } => {
                let x = mixed(error);
                let payload = sign_encode(&x);
                if let Some(e) = error {
                    for ((e, x), s) in e.iter_mut().zip(&x).zip(payload.signs()) {
                        *e = x - s;
                    }
                }
                Payload::Bytes(payload.into_bytes())
            }
            TensorState::Topk { k, error } => {
                let x = mixed(error);
                let payload =
                    topk_encode(&x, *k, cfg.topk_sample_fraction, cfg.topk_max_rounds, seed)?;
                if let Some(e) = error {
                    e.copy_from_slice(&x);
                    for &i in &payload.indices {
                        e[i as usize] = 0.0;
                    }
                }
                Payload::Bytes(payload.to_bytes())
            }
            TensorState::Power(st) => {
                let m = Matrix::new(slot.policy.rows, slot.policy.cols, grad.to_vec())?;
                Payload::Dense(st.power_begin(&m)?)
            }
            TensorState::Acp(st) => {
                let m = Matrix::new(slot.policy.rows, slot.policy.cols, grad.to_vec())?;
                Payload::Dense(st.acp_begin(&m)?.1)
            }
        })
    }

    pub fn absorb(&mut self, tensor: usize, agg: Aggregated) -> Result<Progress, CompressError> {
        let world = self.world;
        let slot = &mut self.slots[tensor];
        let n = slot.policy.numel();
        match (&mut slot.state, agg) {
            (TensorState::Dense, Aggregated::Sum(mut v)) => {
                let inv = 1.0 / world as f32;
                v.iter_mut().for_each(|x| *x *= inv);
                Ok(Progress::Done(v))
            }
            (TensorState::Sign { .. }, Aggregated::Gathered(parts)) => {
                let payloads = parts
                    .into_iter()
                    .map(|b| SignPayload::from_bytes(b, n))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Progress::Done(sign_majority_decode(&payloads)?))
            }
            (TensorState::Topk { k, .. }, Aggregated::Gathered(parts)) => {
                let payloads = parts
                    .iter()
                    .map(|b| SparsePayload::from_bytes(b, *k))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Progress::Done(topk_decode(&payloads, n)?))
            }
            (TensorState::Power(st), Aggregated::Sum(v)) => {
                if st.awaiting_p() {
                    Ok(Progress::Next {
                        stream: Stream::Q,
                        payload: Payload::Dense(st.power_after_p(v, world)?),
                    })
                } else {
                    Ok(Progress::Done(st.power_finish(v, world)?.into_data()))
                }
            }
            (TensorState::Acp(st), Aggregated::Sum(v)) => {
                Ok(Progress::Done(st.acp_finish(v, world)?.into_data()))
            }
            (_, agg) => Err(CompressError::Mismatch(format!(
                "tensor {tensor}: aggregate kind {} does not fit {:?}",
                match agg {
                    Aggregated::Sum(_) => "sum",
                    Aggregated::Gathered(_) => "gathered",
                },
                self.cfg.kind
            ))),
        }
    }

    /// Marks the end of an iteration. Low-rank states advance themselves.
    pub fn end_iteration(&mut self) {
        self.iteration += 1;
    }
}

/// Whole-model ratio of uncompressed to communicated elements.
///
/// `param` is the rank for low-rank kinds and the total number of selected
/// entries `k` for Top-k (each selected entry costs an index and a value).
/// Vector-shaped parameters count at full size on both sides for low-rank
/// kinds. A rank at `min(n, m)` can yield a ratio below 1; it is returned
/// as-is.
pub fn compression_ratio(
    shapes: &[ShapePolicy],
    kind: CompressorKind,
    param: usize,
) -> Result<f64, CompressError> {
    if shapes.is_empty() {
        return Err(CompressError::Config("no shapes".into()));
    }
    let total: usize = shapes.iter().map(ShapePolicy::numel).sum();
    match kind {
        CompressorKind::Identity => Ok(1.0),
        CompressorKind::SignMajority => Ok(32.0),
        CompressorKind::TopkSampled => {
            if param == 0 || param > total {
                return Err(CompressError::Config(format!(
                    "k={param} must be in 1..={total}"
                )));
            }
            Ok(total as f64 / (2 * param) as f64)
        }
        CompressorKind::PowerSgd | CompressorKind::AcpSgd => {
            if param == 0 {
                return Err(CompressError::Config("rank must be ≥ 1".into()));
            }
            let mut packed = 0usize;
            for s in shapes {
                if s.compressible {
                    if param > s.max_rank() {
                        return Err(CompressError::Config(format!(
                            "rank {param} exceeds min(n, m) = {} for shape {:?}",
                            s.max_rank(),
                            s.shape
                        )));
                    }
                    packed += (s.rows + s.cols) * param;
                } else {
                    packed += s.numel();
                }
            }
            Ok(total as f64 / packed as f64)
        }
    }
}
