//! Point-to-point byte transports. Each message is one encoded
//! [`WireFrame`](super::wire::WireFrame); delivery is FIFO per ordered pair
//! of ranks.

use std::io::Write;
use std::net::{Ipv4Addr, SocketAddrV4, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::wire::{Tag, WireFrame};
use super::CommError;

/// Default first port of the loopback transport.
pub const DEFAULT_PORT_BASE: u16 = 29_500;

/// Environment variable overriding [`DEFAULT_PORT_BASE`].
pub const PORT_BASE_ENV: &str = "GRADAX_PORT_BASE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    InProcess,
    LoopbackTcp,
}

pub trait Transport: Send + Sync {
    fn kind(&self) -> TransportKind;

    fn send(&self, to: usize, frame: Vec<u8>) -> Result<(), CommError>;

    fn recv(&self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError>;
}

/// Resolves the loopback base port, honoring `GRADAX_PORT_BASE`.
pub fn port_base_from_env() -> Result<u16, CommError> {
    match std::env::var(PORT_BASE_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CommError::Protocol(format!("{PORT_BASE_ENV}={v:?} is not a port"))),
        Err(_) => Ok(DEFAULT_PORT_BASE),
    }
}

struct Inbox {
    receivers: Vec<Option<Mutex<Receiver<Vec<u8>>>>>,
}

impl Inbox {
    fn recv(&self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        let rx = self
            .receivers
            .get(from)
            .and_then(Option::as_ref)
            .ok_or_else(|| CommError::Protocol(format!("no channel from rank {from}")))?;
        let rx = rx.lock().expect("inbox lock poisoned");
        match rx.recv_timeout(timeout) {
            Ok(bytes) => Ok(bytes),
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout {
                peer: from,
                after: timeout,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::Disconnected { peer: from }),
        }
    }
}

/// Unbounded channels between threads of one process.
pub struct InProcessTransport {
    outbox: Vec<Option<Sender<Vec<u8>>>>,
    inbox: Inbox,
}

impl InProcessTransport {
    /// Fully connected mesh of `world` endpoints, indexed by rank.
    pub fn mesh(world: usize) -> Vec<Self> {
        let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> = (0..world)
            .map(|_| (0..world).map(|_| None).collect())
            .collect();
        let mut receivers: Vec<Vec<Option<Mutex<Receiver<Vec<u8>>>>>> = (0..world)
            .map(|_| (0..world).map(|_| None).collect())
            .collect();
        for from in 0..world {
            for to in 0..world {
                if from != to {
                    let (tx, rx) = mpsc::channel();
                    senders[from][to] = Some(tx);
                    receivers[to][from] = Some(Mutex::new(rx));
                }
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .map(|(outbox, receivers)| Self {
                outbox,
                inbox: Inbox { receivers },
            })
            .collect()
    }
}

impl Transport for InProcessTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::InProcess
    }

    fn send(&self, to: usize, frame: Vec<u8>) -> Result<(), CommError> {
        let tx = self
            .outbox
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| CommError::Protocol(format!("no channel to rank {to}")))?;
        tx.send(frame)
            .map_err(|_| CommError::Disconnected { peer: to })
    }

    fn recv(&self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        self.inbox.recv(from, timeout)
    }
}

/// TCP sockets on 127.0.0.1. One listener per rank at `base_port + rank`;
/// every channel of every pair gets its own connection, and a reader thread
/// per connection drains frames into an in-memory queue so that sends never
/// deadlock against each other.
pub struct TcpTransport {
    writers: Vec<Option<Mutex<TcpStream>>>,
    inbox: Inbox,
}

const HELLO_SEQ: u32 = u32::MAX;

impl TcpTransport {
    /// Connects `channels` independent meshes for this rank. Returns one
    /// transport per channel. Blocks until all peers are connected or
    /// `timeout` elapses.
    pub fn connect(
        rank: usize,
        world: usize,
        base_port: u16,
        channels: usize,
        timeout: Duration,
    ) -> Result<Vec<Self>, CommError> {
        let deadline = Instant::now() + timeout;
        let port = |r: usize| -> Result<u16, CommError> {
            u16::try_from(usize::from(base_port) + r)
                .map_err(|_| CommError::Protocol(format!("port for rank {r} overflows")))
        };
        let listener = TcpListener::bind(SocketAddrV4::new(Ipv4Addr::LOCALHOST, port(rank)?))?;

        let mut streams: Vec<Vec<Option<TcpStream>>> = (0..channels)
            .map(|_| (0..world).map(|_| None).collect())
            .collect();

        // Lower ranks accept, higher ranks dial.
        for peer in 0..rank {
            for (ch, slots) in streams.iter_mut().enumerate() {
                let addr = SocketAddrV4::new(Ipv4Addr::LOCALHOST, port(peer)?);
                let mut s = loop {
                    match TcpStream::connect(addr) {
                        Ok(s) => break s,
                        Err(_) if Instant::now() < deadline => {
                            thread::sleep(Duration::from_millis(20));
                        }
                        Err(_) => {
                            return Err(CommError::Timeout {
                                peer,
                                after: timeout,
                            })
                        }
                    }
                };
                s.set_nodelay(true)?;
                let mut hello = Vec::with_capacity(8);
                hello.extend_from_slice(&(rank as u32).to_le_bytes());
                hello.extend_from_slice(&(ch as u32).to_le_bytes());
                s.write_all(&WireFrame::new(Tag::Control, HELLO_SEQ, hello).encode())?;
                slots[peer] = Some(s);
            }
        }

        let expected = (world - rank - 1) * channels;
        listener.set_nonblocking(true)?;
        let mut accepted = 0;
        while accepted < expected {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    let left = deadline.saturating_duration_since(Instant::now());
                    s.set_read_timeout(Some(left.max(Duration::from_millis(1))))?;
                    let bytes = WireFrame::read_encoded(&mut s)?
                        .ok_or_else(|| CommError::Protocol("peer closed during hello".into()))?;
                    s.set_read_timeout(None)?;
                    let hello = WireFrame::decode(&bytes)?;
                    if hello.tag != Tag::Control
                        || hello.seq != HELLO_SEQ
                        || hello.payload.len() != 8
                    {
                        return Err(CommError::Protocol("malformed hello frame".into()));
                    }
                    let peer = u32::from_le_bytes(hello.payload[0..4].try_into().unwrap()) as usize;
                    let ch = u32::from_le_bytes(hello.payload[4..8].try_into().unwrap()) as usize;
                    if peer <= rank
                        || peer >= world
                        || ch >= channels
                        || streams[ch][peer].is_some()
                    {
                        return Err(CommError::Protocol(format!(
                            "unexpected hello from rank {peer} channel {ch}"
                        )));
                    }
                    streams[ch][peer] = Some(s);
                    accepted += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(CommError::Timeout {
                            peer: rank + 1,
                            after: timeout,
                        });
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let mut out = Vec::with_capacity(channels);
        for slots in streams {
            let mut writers = Vec::with_capacity(world);
            let mut receivers = Vec::with_capacity(world);
            for slot in slots {
                match slot {
                    Some(s) => {
                        let mut reader = s.try_clone()?;
                        let (tx, rx) = mpsc::channel();
                        thread::spawn(move || {
                            while let Ok(Some(frame)) = WireFrame::read_encoded(&mut reader) {
                                if tx.send(frame).is_err() {
                                    break;
                                }
                            }
                        });
                        writers.push(Some(Mutex::new(s)));
                        receivers.push(Some(Mutex::new(rx)));
                    }
                    None => {
                        writers.push(None);
                        receivers.push(None);
                    }
                }
            }
            out.push(Self {
                writers,
                inbox: Inbox { receivers },
            });
        }
        Ok(out)
    }
}

impl Transport for TcpTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::LoopbackTcp
    }

    fn send(&self, to: usize, frame: Vec<u8>) -> Result<(), CommError> {
        let w = self
            .writers
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| CommError::Protocol(format!("no connection to rank {to}")))?;
        let mut s = w.lock().expect("writer lock poisoned");
        s.write_all(&frame)
            .map_err(|_| CommError::Disconnected { peer: to })
    }

    fn recv(&self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        self.inbox.recv(from, timeout)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(std::net::Shutdown::Write);
            }
        }
    }
}
