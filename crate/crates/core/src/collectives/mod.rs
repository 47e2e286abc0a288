//! Process groups and collectives.
//!
//! Every collective consumes one sequence number on the group; all members
//! must issue collectives in the same order. Frames carry the sequence
//! number and are matched against it on receipt.

pub mod transport;
pub mod wire;

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transport::{InProcessTransport, TcpTransport, Transport, TransportKind};
use wire::{f32s_to_le, le_to_f32s, Tag, WireFrame};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum CommError {
    #[error("timed out after {after:?} waiting for rank {peer}")]
    Timeout { peer: usize, after: Duration },
    #[error("rank {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("buffer length mismatch: local {local} elements, rank {peer} has {remote}")]
    LengthMismatch {
        peer: usize,
        local: usize,
        remote: usize,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveOp {
    RingAllReduce,
    ReferenceReduce,
    AllGather,
    Barrier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveRecord {
    pub seq: u32,
    pub op: CollectiveOp,
    /// Logical input size: f32 elements for reductions, payload bytes for
    /// all-gather.
    pub input_len: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Counters since the last reset. Data bytes count only reduction and
/// gather payloads; `wire_bytes_sent` also includes headers and handshakes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wire_bytes_sent: u64,
    pub launch_count: u64,
    pub collectives: Vec<CollectiveRecord>,
}

impl TrafficStats {
    /// Data volume sent, in 32-bit elements.
    pub fn elements_sent(&self) -> u64 {
        self.bytes_sent / 4
    }

    pub fn merge(&mut self, other: &TrafficStats) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.wire_bytes_sent += other.wire_bytes_sent;
        self.launch_count += other.launch_count;
        self.collectives.extend(other.collectives.iter().cloned());
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceAlgo {
    #[default]
    Ring,
    /// Gather to rank 0, sum in rank order in f64, broadcast.
    Reference,
}

pub struct ProcessGroup {
    rank: usize,
    world: usize,
    transport: Box<dyn Transport>,
    next_seq: u32,
    timeout: Duration,
    stats: TrafficStats,
    // frames that arrived for a later sequence number, per peer
    stash: Vec<VecDeque<WireFrame>>,
}

impl std::fmt::Debug for ProcessGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessGroup")
            .field("rank", &self.rank)
            .field("world", &self.world)
            .field("transport", &self.transport.kind())
            .field("next_seq", &self.next_seq)
            .finish()
    }
}

impl ProcessGroup {
    pub fn new(rank: usize, world: usize, transport: Box<dyn Transport>) -> Self {
        assert!(
            world >= 1 && rank < world,
            "rank {rank} outside world {world}"
        );
        Self {
            rank,
            world,
            transport,
            next_seq: 0,
            timeout: DEFAULT_TIMEOUT,
            stats: TrafficStats::default(),
            stash: (0..world).map(|_| VecDeque::new()).collect(),
        }
    }

    /// One group per rank, connected through in-memory channels.
    pub fn in_process(world: usize) -> Vec<Self> {
        InProcessTransport::mesh(world)
            .into_iter()
            .enumerate()
            .map(|(rank, t)| Self::new(rank, world, Box::new(t)))
            .collect()
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world
    }

    pub fn transport_kind(&self) -> TransportKind {
        self.transport.kind()
    }

    pub fn next_sequence(&self) -> u32 {
        self.next_seq
    }

    pub fn traffic_report(&self) -> TrafficStats {
        self.stats.clone()
    }

    /// Data bytes sent since the last reset, without copying the records.
    pub fn bytes_sent(&self) -> u64 {
        self.stats.bytes_sent
    }

    pub fn reset_traffic(&mut self) {
        self.stats = TrafficStats::default();
    }

    fn next(&self) -> usize {
        (self.rank + 1) % self.world
    }

    fn prev(&self) -> usize {
        (self.rank + self.world - 1) % self.world
    }

    fn begin(&mut self) -> u32 {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        self.stats.launch_count += 1;
        seq
    }

    fn finish(&mut self, seq: u32, op: CollectiveOp, input_len: usize, sent0: u64, recv0: u64) {
        self.stats.collectives.push(CollectiveRecord {
            seq,
            op,
            input_len: input_len as u64,
            bytes_sent: self.stats.bytes_sent - sent0,
            bytes_received: self.stats.bytes_received - recv0,
        });
    }

    fn send(&mut self, to: usize, tag: Tag, seq: u32, payload: Vec<u8>) -> Result<(), CommError> {
        let frame = WireFrame::new(tag, seq, payload);
        if tag.carries_data() {
            self.stats.bytes_sent += frame.payload.len() as u64;
        }
        self.stats.wire_bytes_sent += frame.encoded_len() as u64;
        self.transport.send(to, frame.encode())
    }

    fn recv(&mut self, from: usize, tag: Tag, seq: u32) -> Result<Vec<u8>, CommError> {
        let frame = match self.stash[from].iter().position(|f| f.seq == seq) {
            Some(i) => self.stash[from].remove(i).expect("index in range"),
            None => loop {
                let frame = WireFrame::decode(&self.transport.recv(from, self.timeout)?)?;
                if frame.seq == seq {
                    break frame;
                }
                if frame.seq.wrapping_sub(seq) < u32::MAX / 2 {
                    self.stash[from].push_back(frame);
                } else {
                    return Err(CommError::Protocol(format!(
                        "rank {from} sent stale sequence {} while expecting {seq}",
                        frame.seq
                    )));
                }
            },
        };
        if frame.tag != tag {
            return Err(CommError::Protocol(format!(
                "expected {tag:?} from rank {from} at sequence {seq}, got {:?}",
                frame.tag
            )));
        }
        if tag.carries_data() {
            self.stats.bytes_received += frame.payload.len() as u64;
        }
        Ok(frame.payload)
    }

    /// Sends our element count to the next rank and checks the previous
    /// rank's against it.
    fn exchange_length(&mut self, seq: u32, len: usize) -> Result<(), CommError> {
        let (next, prev) = (self.next(), self.prev());
        self.send(next, Tag::Control, seq, (len as u64).to_le_bytes().to_vec())?;
        let bytes = self.recv(prev, Tag::Control, seq)?;
        let remote = bytes
            .try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| CommError::Frame("length handshake must be 8 bytes".into()))?
            as usize;
        if remote != len {
            return Err(CommError::LengthMismatch {
                peer: prev,
                local: len,
                remote,
            });
        }
        Ok(())
    }

    /// In-place element-wise sum over all ranks: `p - 1` reduce-scatter
    /// steps followed by `p - 1` all-gather steps around the ring. When
    /// `p` does not divide the length the buffer is zero-padded to the next
    /// multiple for the duration of the call.
    pub fn ring_all_reduce(&mut self, buf: &mut [f32]) -> Result<(), CommError> {
        let seq = self.begin();
        let (sent0, recv0) = (self.stats.bytes_sent, self.stats.bytes_received);
        let p = self.world;
        if p > 1 {
            self.exchange_length(seq, buf.len())?;
        }
        if p > 1 && !buf.is_empty() {
            let chunk = buf.len().div_ceil(p);
            let mut work = buf.to_vec();
            work.resize(chunk * p, 0.0);
            let (next, prev) = (self.next(), self.prev());
            let range = |c: usize| c * chunk..(c + 1) * chunk;

            for step in 0..p - 1 {
                let send_c = (self.rank + p - step) % p;
                let recv_c = (self.rank + 2 * p - step - 1) % p;
                self.send(
                    next,
                    Tag::ReduceChunk,
                    seq,
                    f32s_to_le(&work[range(send_c)]),
                )?;
                let incoming = le_to_f32s(&self.recv(prev, Tag::ReduceChunk, seq)?)?;
                if incoming.len() != chunk {
                    return Err(CommError::Protocol(format!(
                        "reduce chunk of {} elements, expected {chunk}",
                        incoming.len()
                    )));
                }
                for (w, x) in work[range(recv_c)].iter_mut().zip(incoming) {
                    *w += x;
                }
            }
            // this rank now owns the fully reduced chunk (rank + 1) % p
            for step in 0..p - 1 {
                let send_c = (self.rank + 1 + p - step) % p;
                let recv_c = (self.rank + p - step) % p;
                self.send(
                    next,
                    Tag::GatherChunk,
                    seq,
                    f32s_to_le(&work[range(send_c)]),
                )?;
                let incoming = le_to_f32s(&self.recv(prev, Tag::GatherChunk, seq)?)?;
                if incoming.len() != chunk {
                    return Err(CommError::Protocol(format!(
                        "gather chunk of {} elements, expected {chunk}",
                        incoming.len()
                    )));
                }
                work[range(recv_c)].copy_from_slice(&incoming);
            }
            let n = buf.len();
            buf.copy_from_slice(&work[..n]);
        }
        self.finish(seq, CollectiveOp::RingAllReduce, buf.len(), sent0, recv0);
        Ok(())
    }

    /// Every rank receives every rank's payload, ordered by rank. Payload
    /// lengths may differ. Implemented as `p - 1` forwarding steps around
    /// the ring, so each rank receives exactly the other ranks' bytes.
    pub fn all_gather(&mut self, payload: &[u8]) -> Result<Vec<Vec<u8>>, CommError> {
        let seq = self.begin();
        let (sent0, recv0) = (self.stats.bytes_sent, self.stats.bytes_received);
        let p = self.world;
        let mut out: Vec<Vec<u8>> = vec![Vec::new(); p];
        out[self.rank] = payload.to_vec();
        let (next, prev) = (self.next(), self.prev());
        for step in 0..p.saturating_sub(1) {
            let send_origin = (self.rank + p - step) % p;
            let recv_origin = (self.rank + 2 * p - step - 1) % p;
            self.send(next, Tag::GatherChunk, seq, out[send_origin].clone())?;
            out[recv_origin] = self.recv(prev, Tag::GatherChunk, seq)?;
        }
        self.finish(seq, CollectiveOp::AllGather, payload.len(), sent0, recv0);
        Ok(out)
    }

    /// Deterministic oracle for [`ring_all_reduce`](Self::ring_all_reduce):
    /// rank 0 gathers every buffer, sums in rank order with f64
    /// accumulation, and broadcasts the rounded result.
    pub fn reference_reduce(&mut self, buf: &mut [f32]) -> Result<(), CommError> {
        let seq = self.begin();
        let (sent0, recv0) = (self.stats.bytes_sent, self.stats.bytes_received);
        let p = self.world;
        if p > 1 {
            if self.rank == 0 {
                let mut acc: Vec<f64> = buf.iter().map(|&v| f64::from(v)).collect();
                let mut failure = None;
                for peer in 1..p {
                    let incoming = le_to_f32s(&self.recv(peer, Tag::ReduceChunk, seq)?)?;
                    if incoming.len() != buf.len() {
                        failure.get_or_insert(CommError::LengthMismatch {
                            peer,
                            local: buf.len(),
                            remote: incoming.len(),
                        });
                        continue;
                    }
                    for (a, x) in acc.iter_mut().zip(incoming) {
                        *a += f64::from(x);
                    }
                }
                if let Some(err) = failure {
                    for peer in 1..p {
                        self.send(peer, Tag::Control, seq, b"abort".to_vec())?;
                    }
                    return Err(err);
                }
                for (b, a) in buf.iter_mut().zip(&acc) {
                    *b = *a as f32;
                }
                let bytes = f32s_to_le(buf);
                for peer in 1..p {
                    self.send(peer, Tag::GatherChunk, seq, bytes.clone())?;
                }
            } else {
                self.send(0, Tag::ReduceChunk, seq, f32s_to_le(buf))?;
                let result = le_to_f32s(&self.recv(0, Tag::GatherChunk, seq)?)?;
                if result.len() != buf.len() {
                    return Err(CommError::LengthMismatch {
                        peer: 0,
                        local: buf.len(),
                        remote: result.len(),
                    });
                }
                buf.copy_from_slice(&result);
            }
        }
        self.finish(seq, CollectiveOp::ReferenceReduce, buf.len(), sent0, recv0);
        Ok(())
    }

    pub fn all_reduce(&mut self, buf: &mut [f32], algo: ReduceAlgo) -> Result<(), CommError> {
        match algo {
            ReduceAlgo::Ring => self.ring_all_reduce(buf),
            ReduceAlgo::Reference => self.reference_reduce(buf),
        }
    }

    pub fn barrier(&mut self) -> Result<(), CommError> {
        let seq = self.begin();
        let (sent0, recv0) = (self.stats.bytes_sent, self.stats.bytes_received);
        if self.world > 1 {
            if self.rank == 0 {
                for peer in 1..self.world {
                    self.recv(peer, Tag::Barrier, seq)?;
                }
                for peer in 1..self.world {
                    self.send(peer, Tag::Barrier, seq, Vec::new())?;
                }
            } else {
                self.send(0, Tag::Barrier, seq, Vec::new())?;
                self.recv(0, Tag::Barrier, seq)?;
            }
        }
        self.finish(seq, CollectiveOp::Barrier, 0, sent0, recv0);
        Ok(())
    }
}

/// Independent communication channel. Each stream has its own sequence
/// space so that collectives issued from different contexts never have to
/// agree on a global interleaving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Dense,
    P,
    Q,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Dense, Stream::P, Stream::Q];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Stream::Dense => "dense",
            Stream::P => "P",
            Stream::Q => "Q",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One worker's groups: one per data stream plus a control group for
/// metrics and barriers, which is excluded from data traffic reports.
#[derive(Debug)]
pub struct Communicator {
    streams: [ProcessGroup; 3],
    control: ProcessGroup,
}

impl Communicator {
    fn from_groups(mut groups: Vec<ProcessGroup>) -> Self {
        assert_eq!(groups.len(), 4);
        let control = groups.pop().unwrap();
        let q = groups.pop().unwrap();
        let p = groups.pop().unwrap();
        let dense = groups.pop().unwrap();
        Self {
            streams: [dense, p, q],
            control,
        }
    }

    pub fn in_process(world: usize) -> Vec<Self> {
        let mut per_channel: Vec<std::vec::IntoIter<ProcessGroup>> = (0..4)
            .map(|_| ProcessGroup::in_process(world).into_iter())
            .collect();
        (0..world)
            .map(|_| {
                Self::from_groups(
                    per_channel
                        .iter_mut()
                        .map(|it| it.next().unwrap())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn tcp(
        rank: usize,
        world: usize,
        base_port: u16,
        timeout: Duration,
    ) -> Result<Self, CommError> {
        let transports = TcpTransport::connect(rank, world, base_port, 4, timeout)?;
        Ok(Self::from_groups(
            transports
                .into_iter()
                .map(|t| ProcessGroup::new(rank, world, Box::new(t)).with_timeout(timeout))
                .collect(),
        ))
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        for g in self
            .streams
            .iter_mut()
            .chain(std::iter::once(&mut self.control))
        {
            g.set_timeout(timeout);
        }
    }

    pub fn rank(&self) -> usize {
        self.control.rank()
    }

    pub fn world_size(&self) -> usize {
        self.control.world_size()
    }

    pub fn transport_kind(&self) -> TransportKind {
        self.control.transport_kind()
    }

    pub fn stream(&mut self, s: Stream) -> &mut ProcessGroup {
        &mut self.streams[s.index()]
    }

    pub fn streams_mut(&mut self) -> &mut [ProcessGroup; 3] {
        &mut self.streams
    }

    pub fn control(&mut self) -> &mut ProcessGroup {
        &mut self.control
    }

    pub fn traffic(&self, s: Stream) -> TrafficStats {
        self.streams[s.index()].traffic_report()
    }

    pub fn total_traffic(&self) -> TrafficStats {
        let mut total = TrafficStats::default();
        for g in &self.streams {
            total.merge(&g.stats);
        }
        total
    }

    pub fn reset_traffic(&mut self) {
        for g in &mut self.streams {
            g.reset_traffic();
        }
    }
}
