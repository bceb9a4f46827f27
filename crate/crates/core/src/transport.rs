//! Frame delivery between engines.
//!
//! Two transports share the [`FrameSender`] / [`FrameReceiver`] traits:
//!
//! * an in-process loopback pair, optionally delaying deliveries according
//!   to a [`LatencyModel`] (per-connection order is always preserved);
//! * TCP, where each frame is a one-byte kind tag followed by the body:
//!   `0x01` + 64 bytes, or `0x02` + 4160 bytes.
//!
//! Neither transport authenticates or encrypts the link. Pages are sealed
//! before they reach it, but commands travel in the clear.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{PACKET_SIZE, WORD_SIZE};

pub const TAG_COMMAND64: u8 = 0x01;
pub const TAG_PACKET4160: u8 = 0x02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out")]
    Timeout,
    #[error("unknown frame kind tag {0:#04x}")]
    CorruptFraming(u8),
    #[error("frame of {0} bytes is neither a word nor a packet")]
    BadFrameLength(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Command64,
    Packet4160,
}

impl FrameKind {
    pub fn tag(self) -> u8 {
        match self {
            FrameKind::Command64 => TAG_COMMAND64,
            FrameKind::Packet4160 => TAG_PACKET4160,
        }
    }

    pub fn from_tag(tag: u8) -> Option<FrameKind> {
        match tag {
            TAG_COMMAND64 => Some(FrameKind::Command64),
            TAG_PACKET4160 => Some(FrameKind::Packet4160),
            _ => None,
        }
    }

    pub fn body_len(self) -> usize {
        match self {
            FrameKind::Command64 => WORD_SIZE,
            FrameKind::Packet4160 => PACKET_SIZE,
        }
    }
}

/// A 64-byte word or a 4160-byte packet. The length always matches the kind.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    kind: FrameKind,
    bytes: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({:?}, {} bytes)", self.kind, self.bytes.len())
    }
}

impl Frame {
    pub fn new(bytes: Vec<u8>) -> Result<Frame, TransportError> {
        let kind = match bytes.len() {
            WORD_SIZE => FrameKind::Command64,
            PACKET_SIZE => FrameKind::Packet4160,
            n => return Err(TransportError::BadFrameLength(n)),
        };
        Ok(Frame { kind, bytes })
    }

    pub fn word(bytes: [u8; WORD_SIZE]) -> Frame {
        Frame {
            kind: FrameKind::Command64,
            bytes: bytes.to_vec(),
        }
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub trait FrameSender: Send {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError>;
    /// Closes the sending half; later sends fail with `Disconnected`.
    fn close(&mut self);
}

pub trait FrameReceiver: Send {
    /// Blocks until a frame arrives, the peer goes away, or `timeout`
    /// elapses (`None` waits forever).
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError>;
}

/// Both halves of one connection.
pub struct Endpoint {
    pub tx: Box<dyn FrameSender>,
    pub rx: Box<dyn FrameReceiver>,
}

impl Endpoint {
    pub fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx.send_frame(frame)
    }

    pub fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        self.rx.recv_frame(timeout)
    }

    pub fn close(&mut self) {
        self.tx.close()
    }

    pub fn split(self) -> (Box<dyn FrameSender>, Box<dyn FrameReceiver>) {
        (self.tx, self.rx)
    }
}

/// Delivery delay applied per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    #[default]
    None,
    Fixed {
        micros: u64,
    },
    Uniform {
        min_micros: u64,
        max_micros: u64,
        seed: u64,
    },
}

impl LatencyModel {
    pub fn fixed(d: Duration) -> Self {
        LatencyModel::Fixed {
            micros: d.as_micros() as u64,
        }
    }

    fn sampler(self) -> DelaySampler {
        let rng = match self {
            LatencyModel::Uniform { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        DelaySampler { model: self, rng }
    }
}

struct DelaySampler {
    model: LatencyModel,
    rng: Option<ChaCha8Rng>,
}

impl DelaySampler {
    fn next(&mut self) -> Duration {
        match self.model {
            LatencyModel::None => Duration::ZERO,
            LatencyModel::Fixed { micros } => Duration::from_micros(micros),
            LatencyModel::Uniform {
                min_micros, max_micros, ..
            } => {
                let rng = self.rng.as_mut().expect("uniform model has an rng");
                Duration::from_micros(rng.random_range(min_micros..=max_micros.max(min_micros)))
            }
        }
    }
}

struct Envelope {
    deliver_at: Instant,
    frame: Frame,
}

struct LoopbackSender {
    chan: Option<mpsc::Sender<Envelope>>,
    delay: DelaySampler,
    last_deliver_at: Option<Instant>,
}

impl FrameSender for LoopbackSender {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let chan = self.chan.as_ref().ok_or(TransportError::Disconnected)?;
        let mut deliver_at = Instant::now() + self.delay.next();
        // deliveries never overtake each other on one connection
        if let Some(last) = self.last_deliver_at {
            deliver_at = deliver_at.max(last);
        }
        self.last_deliver_at = Some(deliver_at);
        chan.send(Envelope {
            deliver_at,
            frame: frame.clone(),
        })
        .map_err(|_| TransportError::Disconnected)
    }

    fn close(&mut self) {
        self.chan = None;
    }
}

struct LoopbackReceiver {
    chan: mpsc::Receiver<Envelope>,
    held: Option<Envelope>,
}

impl FrameReceiver for LoopbackReceiver {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let env = match self.held.take() {
            Some(env) => env,
            None => match deadline {
                None => self.chan.recv().map_err(|_| TransportError::Disconnected)?,
                Some(d) => self
                    .chan
                    .recv_timeout(d.saturating_duration_since(Instant::now()))
                    .map_err(|e| match e {
                        RecvTimeoutError::Timeout => TransportError::Timeout,
                        RecvTimeoutError::Disconnected => TransportError::Disconnected,
                    })?,
            },
        };
        let now = Instant::now();
        if env.deliver_at > now {
            if let Some(d) = deadline {
                if d < env.deliver_at {
                    std::thread::sleep(d.saturating_duration_since(now));
                    self.held = Some(env);
                    return Err(TransportError::Timeout);
                }
            }
            std::thread::sleep(env.deliver_at - now);
        }
        Ok(env.frame)
    }
}

/// Two connected in-process endpoints. Each direction draws its delays from
/// its own copy of `latency`.
pub fn loopback_pair(latency: LatencyModel) -> (Endpoint, Endpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let reverse = match latency {
        LatencyModel::Uniform {
            min_micros,
            max_micros,
            seed,
        } => LatencyModel::Uniform {
            min_micros,
            max_micros,
            seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        },
        other => other,
    };
    let make = |chan, model: LatencyModel, rx| Endpoint {
        tx: Box::new(LoopbackSender {
            chan: Some(chan),
            delay: model.sampler(),
            last_deliver_at: None,
        }),
        rx: Box::new(LoopbackReceiver { chan: rx, held: None }),
    };
    (make(a_tx, latency, a_rx), make(b_tx, reverse, b_rx))
}

struct TcpSender {
    stream: Option<TcpStream>,
    delay: DelaySampler,
    buf: Vec<u8>,
}

impl FrameSender for TcpSender {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let stream = self.stream.as_mut().ok_or(TransportError::Disconnected)?;
        let d = self.delay.next();
        if !d.is_zero() {
            std::thread::sleep(d);
        }
        self.buf.clear();
        self.buf.push(frame.kind().tag());
        self.buf.extend_from_slice(frame.bytes());
        stream.write_all(&self.buf).map_err(io_error)
    }

    fn close(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}

struct TcpReceiver {
    stream: TcpStream,
    buf: Vec<u8>,
    dead: bool,
}

impl TcpReceiver {
    fn take_frame(&mut self) -> Result<Option<Frame>, TransportError> {
        let Some(&tag) = self.buf.first() else {
            return Ok(None);
        };
        let kind = match FrameKind::from_tag(tag) {
            Some(k) => k,
            None => {
                self.dead = true;
                let _ = self.stream.shutdown(Shutdown::Both);
                return Err(TransportError::CorruptFraming(tag));
            }
        };
        let total = 1 + kind.body_len();
        if self.buf.len() < total {
            return Ok(None);
        }
        let bytes = self.buf[1..total].to_vec();
        self.buf.drain(..total);
        Ok(Some(Frame { kind, bytes }))
    }
}

impl FrameReceiver for TcpReceiver {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        if self.dead {
            return Err(TransportError::Disconnected);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut chunk = [0u8; 8192];
        loop {
            if let Some(frame) = self.take_frame()? {
                return Ok(frame);
            }
            let wait = match deadline {
                None => None,
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(TransportError::Timeout);
                    }
                    Some(left)
                }
            };
            self.stream.set_read_timeout(wait).map_err(io_error)?;
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    self.dead = true;
                    return Err(TransportError::Disconnected);
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.dead = true;
                    return Err(io_error(e));
                }
            }
        }
    }
}

fn io_error(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::NotConnected
        | io::ErrorKind::UnexpectedEof => TransportError::Disconnected,
        _ => TransportError::Io(e.to_string()),
    }
}

/// Wraps an established TCP connection. `latency` delays each send.
pub fn tcp_endpoint(stream: TcpStream, latency: LatencyModel) -> Result<Endpoint, TransportError> {
    stream.set_nodelay(true).map_err(io_error)?;
    let read_half = stream.try_clone().map_err(io_error)?;
    Ok(Endpoint {
        tx: Box::new(TcpSender {
            stream: Some(stream),
            delay: latency.sampler(),
            buf: Vec::with_capacity(1 + PACKET_SIZE),
        }),
        rx: Box::new(TcpReceiver {
            stream: read_half,
            buf: Vec::with_capacity(2 * (1 + PACKET_SIZE)),
            dead: false,
        }),
    })
}

pub fn tcp_connect(addr: impl ToSocketAddrs, latency: LatencyModel) -> Result<Endpoint, TransportError> {
    let stream = TcpStream::connect(addr).map_err(io_error)?;
    tcp_endpoint(stream, latency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn word(b: u8) -> Frame {
        Frame::word([b; WORD_SIZE])
    }

    fn packet(b: u8) -> Frame {
        Frame::new(vec![b; PACKET_SIZE]).unwrap()
    }

    #[test]
    fn frame_lengths() {
        assert_eq!(Frame::new(vec![0; 64]).unwrap().kind(), FrameKind::Command64);
        assert_eq!(Frame::new(vec![0; 4160]).unwrap().kind(), FrameKind::Packet4160);
        assert_eq!(Frame::new(vec![0; 65]).unwrap_err(), TransportError::BadFrameLength(65));
    }

    #[test]
    fn loopback_roundtrip_and_close() {
        let (mut a, mut b) = loopback_pair(LatencyModel::None);
        a.send_frame(&word(7)).unwrap();
        a.send_frame(&packet(9)).unwrap();
        assert_eq!(b.recv_frame(Some(Duration::from_secs(1))).unwrap(), word(7));
        assert_eq!(b.recv_frame(None).unwrap(), packet(9));
        assert_eq!(b.recv_frame(Some(Duration::from_millis(5))).unwrap_err(), TransportError::Timeout);
        a.close();
        assert_eq!(a.send_frame(&word(1)).unwrap_err(), TransportError::Disconnected);
        assert_eq!(b.recv_frame(None).unwrap_err(), TransportError::Disconnected);
    }

    #[test]
    fn fixed_latency_is_honoured() {
        let (mut a, mut b) = loopback_pair(LatencyModel::fixed(Duration::from_millis(1)));
        let start = Instant::now();
        a.send_frame(&word(1)).unwrap();
        b.recv_frame(None).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(1));
    }

    #[test]
    fn random_latency_preserves_order() {
        let model = LatencyModel::Uniform {
            min_micros: 0,
            max_micros: 300,
            seed: 5,
        };
        let (mut a, mut b) = loopback_pair(model);
        for i in 0..200u8 {
            a.send_frame(&word(i)).unwrap();
        }
        for i in 0..200u8 {
            assert_eq!(b.recv_frame(None).unwrap(), word(i));
        }
    }

    #[test]
    fn held_frame_survives_short_timeout() {
        let (mut a, mut b) = loopback_pair(LatencyModel::fixed(Duration::from_millis(30)));
        a.send_frame(&word(4)).unwrap();
        assert_eq!(b.recv_frame(Some(Duration::from_millis(1))).unwrap_err(), TransportError::Timeout);
        assert_eq!(b.recv_frame(Some(Duration::from_secs(1))).unwrap(), word(4));
    }

    #[test]
    fn tcp_reassembles_and_rejects_bad_tags() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            // a frame split across writes, then a bad tag
            let mut bytes = vec![TAG_PACKET4160];
            bytes.extend_from_slice(&[3u8; PACKET_SIZE]);
            for chunk in bytes.chunks(1000) {
                s.write_all(chunk).unwrap();
                s.flush().unwrap();
                std::thread::sleep(Duration::from_millis(2));
            }
            s.write_all(&[0x7f, 0, 0]).unwrap();
            std::thread::sleep(Duration::from_millis(50));
        });
        let mut ep = tcp_connect(addr, LatencyModel::None).unwrap();
        assert_eq!(ep.recv_frame(Some(Duration::from_secs(5))).unwrap(), packet(3));
        assert_eq!(ep.recv_frame(Some(Duration::from_secs(5))).unwrap_err(), TransportError::CorruptFraming(0x7f));
        assert_eq!(ep.recv_frame(None).unwrap_err(), TransportError::Disconnected);
        server.join().unwrap();
    }
}
