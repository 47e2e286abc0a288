//! Scheduling of gradient collectives against backward computation.

pub mod bucket;
pub mod engine;
pub mod timeline;

use thiserror::Error;

use crate::collectives::CommError;
use crate::compressors::CompressError;

pub use bucket::{
    compressed_buffer_size, plan_buckets, Bucket, BucketEntry, BucketPlan, BufferPolicy,
    PayloadTable, SchedulePlan, TensorPayload, DEFAULT_BUFFER_BYTES, MB,
};
pub use engine::{
    run_iteration, CollectiveLaunch, EngineOptions, GradientSource, IterationOutput, LayerGrads,
    ScheduleMode, SyntheticSource,
};
pub use timeline::{measure_breakdown, Breakdown, Event, TaskKind, Timeline};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("schedule error: {0}")]
    Plan(String),
    #[error("malformed timeline: {0}")]
    Timeline(String),
    #[error("gradient source failed: {0}")]
    Source(String),
}
