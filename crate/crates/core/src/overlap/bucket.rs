//! Tensor-fusion bucket planning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::collectives::Stream;
use crate::compressors::{
    CompressError, Compressor, CompressorConfig, CompressorKind, SignPayload, SparsePayload,
};
use crate::tensor::reshape_to_matrix;

pub const MB: u64 = 1 << 20;

/// Default fusion buffer for uncompressed gradients.
pub const DEFAULT_BUFFER_BYTES: u64 = 25 * MB;

/// Smallest buffer [`compressed_buffer_size`] will return.
pub const MIN_COMPRESSED_BUFFER: u64 = 1024;

/// Buffer size for compressed tensors: the default buffer scaled by the
/// compression rate (compressed bytes / uncompressed bytes), rounded up,
/// and never below 1 KiB.
pub fn compressed_buffer_size(
    default_bytes: u64,
    compression_rate: f64,
) -> Result<u64, EngineError> {
    if default_bytes == 0 {
        return Err(EngineError::Plan(
            "default buffer size must be positive".into(),
        ));
    }
    if !(compression_rate > 0.0 && compression_rate <= 1.0) {
        return Err(EngineError::Plan(format!(
            "compression rate {compression_rate} must be in (0, 1]"
        )));
    }
    let scaled = (default_bytes as f64 * compression_rate).ceil() as u64;
    Ok(scaled.max(MIN_COMPRESSED_BUFFER))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEntry {
    pub tensor: usize,
    pub elements: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub entries: Vec<BucketEntry>,
}

impl Bucket {
    pub fn bytes(&self) -> usize {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.tensor)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketPlan {
    pub stream: Stream,
    /// `u64::MAX` stands for an unbounded buffer.
    pub buffer_size_bytes: u64,
    pub buckets: Vec<Bucket>,
}

impl BucketPlan {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn tensor_count(&self) -> usize {
        self.buckets.iter().map(|b| b.entries.len()).sum()
    }
}

/// Greedy fusion in ready order: append to the open bucket and seal it as
/// soon as its total reaches `buffer_size`. A zero buffer gives one bucket
/// per tensor; `u64::MAX` gives a single bucket.
pub fn plan_buckets(stream: Stream, ready: &[BucketEntry], buffer_size: u64) -> BucketPlan {
    let mut buckets = Vec::new();
    let mut open: Vec<BucketEntry> = Vec::new();
    let mut total = 0u64;
    for e in ready {
        open.push(e.clone());
        total += e.bytes as u64;
        if total >= buffer_size {
            buckets.push(Bucket {
                entries: std::mem::take(&mut open),
            });
            total = 0;
        }
    }
    if !open.is_empty() {
        buckets.push(Bucket { entries: open });
    }
    BucketPlan {
        stream,
        buffer_size_bytes: buffer_size,
        buckets,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    /// Same buffer size on every stream.
    Fixed(u64),
    /// Default size on uncompressed streams, scaled by each stream's
    /// compression rate on compressed ones.
    Compressed { default_bytes: u64 },
}

/// Bytes each tensor puts on each stream, independent of any live
/// compressor state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadTable {
    pub tensors: Vec<TensorPayload>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPayload {
    /// Uncompressed size.
    pub raw_bytes: usize,
    /// Travels as low-rank factors on the P and Q streams.
    pub factorized: bool,
    pub dense_bytes: usize,
    pub p_bytes: usize,
    pub q_bytes: usize,
}

impl TensorPayload {
    pub fn bytes(&self, stream: Stream) -> usize {
        match stream {
            Stream::Dense => self.dense_bytes,
            Stream::P => self.p_bytes,
            Stream::Q => self.q_bytes,
        }
    }

    pub fn uses(&self, stream: Stream) -> bool {
        self.factorized == (stream != Stream::Dense)
    }
}

impl PayloadTable {
    pub fn from_compressor(c: &Compressor) -> Self {
        let tensors = (0..c.num_tensors())
            .map(|t| {
                let factorized = c.is_factorized(t);
                TensorPayload {
                    raw_bytes: 4 * c.policy(t).numel(),
                    factorized,
                    dense_bytes: if factorized {
                        0
                    } else {
                        c.payload_bytes(t, Stream::Dense)
                    },
                    p_bytes: if factorized {
                        c.payload_bytes(t, Stream::P)
                    } else {
                        0
                    },
                    q_bytes: if factorized {
                        c.payload_bytes(t, Stream::Q)
                    } else {
                        0
                    },
                }
            })
            .collect();
        Self { tensors }
    }

    /// Same sizes a [`Compressor`] built from `cfg` would report, computed
    /// from shapes alone.
    pub fn analytic(cfg: &CompressorConfig, shapes: &[Vec<usize>]) -> Result<Self, EngineError> {
        cfg.validate()?;
        let tensors = shapes
            .iter()
            .map(|shape| {
                let policy = reshape_to_matrix(shape).map_err(CompressError::from)?;
                let n = policy.numel();
                let mut t = TensorPayload {
                    raw_bytes: 4 * n,
                    factorized: false,
                    dense_bytes: 4 * n,
                    p_bytes: 0,
                    q_bytes: 0,
                };
                match cfg.kind {
                    CompressorKind::Identity => {}
                    CompressorKind::SignMajority => t.dense_bytes = SignPayload::byte_len(n),
                    CompressorKind::TopkSampled => {
                        t.dense_bytes = SparsePayload::byte_len(cfg.topk_k(n))
                    }
                    CompressorKind::PowerSgd | CompressorKind::AcpSgd if policy.compressible => {
                        let r = cfg.rank.min(policy.max_rank());
                        t.factorized = true;
                        t.dense_bytes = 0;
                        t.p_bytes = 4 * policy.rows * r;
                        t.q_bytes = 4 * policy.cols * r;
                    }
                    _ => {}
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self { tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Compressed-to-uncompressed byte ratio over the tensors using
    /// `stream`; `None` if none does.
    pub fn stream_compression_rate(&self, stream: Stream) -> Option<f64> {
        let (raw, packed) = self
            .tensors
            .iter()
            .filter(|t| t.uses(stream))
            .fold((0usize, 0usize), |(r, p), t| {
                (r + t.raw_bytes, p + t.bytes(stream))
            });
        (raw > 0).then(|| packed as f64 / raw as f64)
    }
}

/// One bucket plan per stream in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub streams: BTreeMap<Stream, BucketPlan>,
}

impl SchedulePlan {
    /// Plans every stream the compressor can use, over tensors in
    /// `ready_order` (gradient-ready order).
    pub fn build(
        compressor: &Compressor,
        ready_order: &[usize],
        policy: BufferPolicy,
    ) -> Result<Self, EngineError> {
        Self::from_table(
            &PayloadTable::from_compressor(compressor),
            ready_order,
            policy,
        )
    }

    pub fn from_table(
        table: &PayloadTable,
        ready_order: &[usize],
        policy: BufferPolicy,
    ) -> Result<Self, EngineError> {
        let n = table.len();
        let mut seen = vec![false; n];
        for &t in ready_order {
            if t >= n || std::mem::replace(&mut seen[t], true) {
                return Err(EngineError::Plan(format!(
                    "ready order repeats or exceeds tensor {t}"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(EngineError::Plan(
                "ready order does not cover every tensor".into(),
            ));
        }

        let mut streams = BTreeMap::new();
        for stream in Stream::ALL {
            let entries: Vec<BucketEntry> = ready_order
                .iter()
                .copied()
                .filter(|&t| table.tensors[t].uses(stream))
                .map(|t| {
                    let bytes = table.tensors[t].bytes(stream);
                    BucketEntry {
                        tensor: t,
                        elements: bytes / 4,
                        bytes,
                    }
                })
                .collect();
            if entries.is_empty() {
                continue;
            }
            let buffer = match policy {
                BufferPolicy::Fixed(b) => b,
                BufferPolicy::Compressed { default_bytes } => {
                    let rate = table.stream_compression_rate(stream).unwrap_or(1.0);
                    compressed_buffer_size(default_bytes, rate.min(1.0))?
                }
            };
            streams.insert(stream, plan_buckets(stream, &entries, buffer));
        }
        Ok(Self { streams })
    }

    pub fn stream(&self, s: Stream) -> Option<&BucketPlan> {
        self.streams.get(&s)
    }

    pub fn bucket_count(&self) -> usize {
        self.streams.values().map(BucketPlan::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::{CompressorConfig, CompressorKind};

    fn entries(sizes_mb: &[f64]) -> Vec<BucketEntry> {
        sizes_mb
            .iter()
            .enumerate()
            .map(|(i, mb)| {
                let bytes = (mb * MB as f64) as usize;
                BucketEntry {
                    tensor: i,
                    elements: bytes / 4,
                    bytes,
                }
            })
            .collect()
    }

    fn ids(plan: &BucketPlan) -> Vec<Vec<usize>> {
        plan.buckets.iter().map(|b| b.tensors().collect()).collect()
    }

    fn mb2(bytes: u64) -> f64 {
        (bytes as f64 / MB as f64 * 100.0).round() / 100.0
    }

    #[test]
    fn compressed_buffer_examples() {
        assert_eq!(mb2(compressed_buffer_size(25 * MB, 0.0064).unwrap()), 0.16);
        assert_eq!(mb2(compressed_buffer_size(25 * MB, 0.0107).unwrap()), 0.27);
        assert_eq!(compressed_buffer_size(25 * MB, 1.0).unwrap(), 25 * MB);
        assert_eq!(
            compressed_buffer_size(10, 0.5).unwrap(),
            MIN_COMPRESSED_BUFFER
        );
        assert!(compressed_buffer_size(25 * MB, 0.0).is_err());
        assert!(compressed_buffer_size(25 * MB, 1.5).is_err());
        assert!(compressed_buffer_size(0, 0.5).is_err());
    }

    #[test]
    fn greedy_examples() {
        let e = entries(&[0.10, 0.10, 0.05]);
        let buf = (0.16 * MB as f64) as u64;
        assert_eq!(
            ids(&plan_buckets(Stream::P, &e, buf)),
            vec![vec![0, 1], vec![2]]
        );
        assert_eq!(
            ids(&plan_buckets(Stream::P, &e, 0)),
            vec![vec![0], vec![1], vec![2]]
        );
        assert_eq!(
            ids(&plan_buckets(Stream::P, &e, 1_000_000_000)),
            vec![vec![0, 1, 2]]
        );
    }

    #[test]
    fn resnet50_sized_model_makes_four_buckets() {
        // 97.5 MB spread over 160 tensors of uneven size
        let sizes: Vec<f64> = (0..160)
            .map(|i| 97.5 / 160.0 * (0.5 + (i % 2) as f64))
            .collect();
        let plan = plan_buckets(Stream::Dense, &entries(&sizes), DEFAULT_BUFFER_BYTES);
        assert_eq!(plan.len(), 4);
    }

    #[test]
    fn schedule_plan_covers_streams() {
        let shapes = vec![vec![16, 8], vec![16], vec![4, 16], vec![4]];
        let c = crate::compressors::Compressor::new(
            CompressorConfig::new(CompressorKind::AcpSgd).with_rank(2),
            &shapes,
            1,
            0,
        )
        .unwrap();
        let plan = SchedulePlan::build(&c, &[3, 2, 1, 0], BufferPolicy::Fixed(0)).unwrap();
        assert_eq!(
            ids(plan.stream(Stream::Dense).unwrap()),
            vec![vec![3], vec![1]]
        );
        assert_eq!(ids(plan.stream(Stream::P).unwrap()), vec![vec![2], vec![0]]);
        assert_eq!(
            plan.stream(Stream::Q).unwrap().buckets[0].bytes(),
            4 * 16 * 2
        );
        assert!(SchedulePlan::build(&c, &[3, 2, 1], BufferPolicy::Fixed(0)).is_err());
        assert!(SchedulePlan::build(&c, &[3, 2, 1, 1], BufferPolicy::Fixed(0)).is_err());

        let plan = SchedulePlan::build(
            &c,
            &[3, 2, 1, 0],
            BufferPolicy::Compressed {
                default_bytes: 25 * MB,
            },
        )
        .unwrap();
        assert_eq!(
            plan.stream(Stream::Dense).unwrap().buffer_size_bytes,
            25 * MB
        );
        assert!(plan.stream(Stream::P).unwrap().buffer_size_bytes < 25 * MB);
    }

    #[test]
    fn analytic_table_matches_compressor() {
        let shapes = vec![
            vec![16, 8],
            vec![16],
            vec![4, 16],
            vec![4],
            vec![3, 3, 5],
            vec![7],
        ];
        for kind in CompressorKind::ALL {
            let cfg = CompressorConfig::new(kind)
                .with_rank(5)
                .with_topk_density(0.3);
            let c = crate::compressors::Compressor::new(cfg.clone(), &shapes, 2, 0).unwrap();
            let live = PayloadTable::from_compressor(&c);
            assert_eq!(
                PayloadTable::analytic(&cfg, &shapes).unwrap(),
                live,
                "{kind}"
            );
            for s in Stream::ALL {
                assert_eq!(
                    live.stream_compression_rate(s),
                    c.stream_compression_rate(s),
                    "{kind} {s}"
                );
            }
        }
    }
}
