//! Message transport between ring neighbors.
//!
//! Two implementations behind one trait: a deterministic in-memory transport
//! for tests and simulation, and a TCP transport for multi-process runs.
//! Ring traffic only ever flows rank -> next, so an endpoint is a pair of
//! (send-to-next, receive-from-prev) channels.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

/// Wire magic for TCP frames.
pub const FRAME_MAGIC: [u8; 4] = *b"RBA1";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer disconnected")]
    Closed,
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Chunk = 0,
    Scalar = 1,
    Control = 2,
}

impl MsgType {
    fn from_byte(b: u8) -> Result<MsgType, TransportError> {
        match b {
            0 => Ok(MsgType::Chunk),
            1 => Ok(MsgType::Scalar),
            2 => Ok(MsgType::Control),
            other => Err(TransportError::FrameCorrupt(format!(
                "unknown msg_type {other}"
            ))),
        }
    }
}

/// One message between ring neighbors. CHUNK and SCALAR payloads are
/// little-endian 64-bit IEEE-754 reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub sender_rank: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn chunk(sender_rank: u32, values: &[f64]) -> Frame {
        Frame {
            msg_type: MsgType::Chunk,
            sender_rank,
            payload: encode_f64s(values),
        }
    }

    pub fn scalar(sender_rank: u32, values: &[f64]) -> Frame {
        Frame {
            msg_type: MsgType::Scalar,
            sender_rank,
            payload: encode_f64s(values),
        }
    }

    /// Decode the payload as little-endian f64s.
    pub fn floats(&self) -> Result<Vec<f64>, TransportError> {
        if self.payload.len() % 8 != 0 {
            return Err(TransportError::FrameCorrupt(format!(
                "payload length {} not a multiple of 8",
                self.payload.len()
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// A rank's view of the ring: send toward the next rank, receive from the
/// previous one. Frames between a fixed pair arrive exactly once, in order.
pub trait RingTransport {
    fn send_next(&mut self, frame: Frame) -> Result<(), TransportError>;
    fn recv_prev(&mut self) -> Result<Frame, TransportError>;
}

/// Send/receive counters, shared with the test harness.
#[derive(Debug, Default)]
pub struct Counters {
    pub frames_sent: AtomicU64,
    pub chunks_sent: AtomicU64,
    pub frames_received: AtomicU64,
}

/// In-memory endpoint backed by unbounded per-pair queues. Unbounded queues
/// keep the single-process simulator deadlock-free: a send never blocks.
pub struct MemEndpoint {
    to_next: mpsc::Sender<Frame>,
    from_prev: mpsc::Receiver<Frame>,
    counters: Arc<Counters>,
}

/// Wire up a full in-memory ring. Returns one endpoint per rank plus the
/// per-rank counters (usable after the endpoints move into worker threads).
pub fn mem_ring(n: usize) -> (Vec<MemEndpoint>, Vec<Arc<Counters>>) {
    assert!(n >= 2);
    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = mpsc::channel();
        senders.push(Some(tx));
        receivers.push(Some(rx));
    }
    let counters: Vec<Arc<Counters>> = (0..n).map(|_| Arc::new(Counters::default())).collect();
    let mut endpoints = Vec::with_capacity(n);
    for rank in 0..n {
        let next = (rank + 1) % n;
        endpoints.push(MemEndpoint {
            to_next: senders[next].take().unwrap(),
            from_prev: receivers[rank].take().unwrap(),
            counters: counters[rank].clone(),
        });
    }
    (endpoints, counters)
}

impl RingTransport for MemEndpoint {
    fn send_next(&mut self, frame: Frame) -> Result<(), TransportError> {
        self.counters.frames_sent.fetch_add(1, Ordering::Relaxed);
        if frame.msg_type == MsgType::Chunk {
            self.counters.chunks_sent.fetch_add(1, Ordering::Relaxed);
        }
        self.to_next.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv_prev(&mut self) -> Result<Frame, TransportError> {
        let frame = self.from_prev.recv().map_err(|_| TransportError::Closed)?;
        self.counters.frames_received.fetch_add(1, Ordering::Relaxed);
        Ok(frame)
    }
}

/// TCP endpoint: one outbound stream to the next rank, one inbound stream
/// from the previous rank.
///
/// Wire format per frame: magic `RBA1`, 1-byte msg_type, 4-byte LE sender
/// rank, 8-byte LE payload length, then the payload.
pub struct TcpEndpoint {
    to_next: TcpStream,
    from_prev: TcpStream,
}

impl TcpEndpoint {
    /// Join a TCP ring. `addrs[rank]` is each rank's listen address; this
    /// rank accepts from its predecessor on `listener` and dials its
    /// successor, retrying until the peer's listener is up.
    pub fn connect(
        rank: usize,
        addrs: &[SocketAddr],
        listener: &TcpListener,
        timeout: Duration,
    ) -> Result<TcpEndpoint, TransportError> {
        let n = addrs.len();
        assert!(n >= 2);
        assert!(rank < n);
        let next_addr = addrs[(rank + 1) % n];
        let deadline = Instant::now() + timeout;
        let to_next = loop {
            match TcpStream::connect(next_addr) {
                Ok(s) => break s,
                Err(e) => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Io(e));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        };
        to_next.set_nodelay(true)?;
        let (from_prev, _) = listener.accept()?;
        from_prev.set_nodelay(true)?;
        Ok(TcpEndpoint { to_next, from_prev })
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), TransportError> {
    w.write_all(&FRAME_MAGIC)?;
    w.write_all(&[frame.msg_type as u8])?;
    w.write_all(&frame.sender_rank.to_le_bytes())?;
    w.write_all(&(frame.payload.len() as u64).to_le_bytes())?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
    let mut magic = [0u8; 4];
    read_exact_or_closed(r, &mut magic)?;
    if magic != FRAME_MAGIC {
        return Err(TransportError::FrameCorrupt(format!(
            "bad magic {magic:02x?}"
        )));
    }
    let mut head = [0u8; 13];
    read_exact_or_closed(r, &mut head)?;
    let msg_type = MsgType::from_byte(head[0])?;
    let sender_rank = u32::from_le_bytes(head[1..5].try_into().unwrap());
    let len = u64::from_le_bytes(head[5..13].try_into().unwrap());
    let mut payload = vec![0u8; len as usize];
    read_exact_or_closed(r, &mut payload)?;
    Ok(Frame {
        msg_type,
        sender_rank,
        payload,
    })
}

fn read_exact_or_closed<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TransportError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(TransportError::Closed),
        Err(e) => Err(e.into()),
    }
}

impl RingTransport for TcpEndpoint {
    fn send_next(&mut self, frame: Frame) -> Result<(), TransportError> {
        write_frame(&mut self.to_next, &frame)
    }

    fn recv_prev(&mut self) -> Result<Frame, TransportError> {
        read_frame(&mut self.from_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_ordering_per_pair() {
        let (mut eps, _) = mem_ring(2);
        let mut e1 = eps.pop().unwrap();
        let mut e0 = eps.pop().unwrap();
        e0.send_next(Frame::chunk(0, &[1.0])).unwrap();
        e0.send_next(Frame::scalar(0, &[2.0])).unwrap();
        let a = e1.recv_prev().unwrap();
        let b = e1.recv_prev().unwrap();
        assert_eq!(a.msg_type, MsgType::Chunk);
        assert_eq!(b.msg_type, MsgType::Scalar);
        assert_eq!(b.floats().unwrap(), vec![2.0]);
    }

    #[test]
    fn ping_pong_counter_audit() {
        let (mut eps, counters) = mem_ring(2);
        let mut e1 = eps.pop().unwrap();
        let mut e0 = eps.pop().unwrap();
        for i in 0..1000u32 {
            e0.send_next(Frame::chunk(0, &[i as f64])).unwrap();
            let f = e1.recv_prev().unwrap();
            assert_eq!(f.floats().unwrap()[0], i as f64);
            e1.send_next(f).unwrap();
            let back = e0.recv_prev().unwrap();
            assert_eq!(back.floats().unwrap()[0], i as f64);
        }
        assert_eq!(counters[0].frames_sent.load(Ordering::Relaxed), 1000);
        assert_eq!(counters[1].frames_sent.load(Ordering::Relaxed), 1000);
        assert_eq!(counters[0].frames_received.load(Ordering::Relaxed), 1000);
        assert_eq!(counters[1].frames_received.load(Ordering::Relaxed), 1000);
    }

    #[test]
    fn closed_on_peer_shutdown() {
        let (mut eps, _) = mem_ring(2);
        let mut e1 = eps.pop().unwrap();
        drop(eps.pop().unwrap());
        assert!(matches!(e1.recv_prev(), Err(TransportError::Closed)));
    }

    #[test]
    fn frame_roundtrip_bytes() {
        let frame = Frame::chunk(3, &[1.5, -2.25]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &frame).unwrap();
        assert_eq!(&buf[..4], b"RBA1");
        let back = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, frame);
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let frame = Frame::scalar(0, &[1.0]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &frame).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_frame(&mut buf.as_slice()),
            Err(TransportError::FrameCorrupt(_))
        ));
    }

    #[test]
    fn truncated_stream_is_closed() {
        let frame = Frame::scalar(0, &[1.0]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &frame).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_frame(&mut buf.as_slice()),
            Err(TransportError::Closed)
        ));
    }
}
