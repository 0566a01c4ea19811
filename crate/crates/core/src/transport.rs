//! Length-prefixed framing, a lossy bounded FIFO, and a TCP collector.
//!
//! Stream layout: the magic `etp1`, then `[length:1][payload:length]`
//! repeated, with `length` in `1..=255`.

use std::collections::VecDeque;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::packet::{encode_packet, CodecError, TracePacket, MAX_PAYLOAD};

pub const MAGIC: &[u8; 4] = b"etp1";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("write failed: {0}")]
    SinkError(#[source] io::Error),
    #[error("read failed: {0}")]
    SourceError(#[source] io::Error),
    #[error("stream does not start with `etp1`")]
    BadMagic,
    #[error("stream ends inside the frame at byte {0}")]
    TruncatedFrame(usize),
    #[error("zero-length frame at byte {0}")]
    EmptyFrame(usize),
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// One framed payload of 1..=255 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame(Vec<u8>);

impl Frame {
    pub fn new(payload: Vec<u8>) -> Result<Self, TransportError> {
        match payload.len() {
            0 => Err(TransportError::EmptyFrame(0)),
            n if n > MAX_PAYLOAD => Err(CodecError::PayloadTooLong(n).into()),
            _ => Ok(Self(payload)),
        }
    }

    pub fn from_packet(packet: &TracePacket) -> Result<Self, TransportError> {
        Self::new(encode_packet(packet)?)
    }

    pub fn payload(&self) -> &[u8] {
        &self.0
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.0
    }

    /// Bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> usize {
        self.0.len() + 1
    }

    fn write_to(&self, sink: &mut impl Write) -> io::Result<()> {
        sink.write_all(&[self.0.len() as u8])?;
        sink.write_all(&self.0)
    }
}

/// Writes the magic and every frame; returns the number of frames.
pub fn write_frames(frames: &[Frame], mut sink: impl Write) -> Result<usize, TransportError> {
    sink.write_all(MAGIC).map_err(TransportError::SinkError)?;
    for frame in frames {
        frame.write_to(&mut sink).map_err(TransportError::SinkError)?;
    }
    sink.flush().map_err(TransportError::SinkError)?;
    Ok(frames.len())
}

/// Encodes and frames `packets`.
pub fn write_stream(packets: &[TracePacket], sink: impl Write) -> Result<usize, TransportError> {
    let frames = packets
        .iter()
        .map(Frame::from_packet)
        .collect::<Result<Vec<_>, _>>()?;
    write_frames(&frames, sink)
}

/// Frames raw payloads, rejecting any that do not fit a length byte.
pub fn write_payloads(payloads: &[Vec<u8>], sink: impl Write) -> Result<usize, TransportError> {
    let frames = payloads
        .iter()
        .map(|p| Frame::new(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    write_frames(&frames, sink)
}

/// Incremental frame parser over any byte source.
struct FrameReader<R> {
    source: R,
    offset: usize,
}

impl<R: Read> FrameReader<R> {
    fn open(mut source: R) -> Result<Self, TransportError> {
        let mut magic = [0u8; 4];
        match read_full(&mut source, &mut magic) {
            Ok(4) if &magic == MAGIC => Ok(Self { source, offset: 4 }),
            Ok(_) => Err(TransportError::BadMagic),
            Err(e) => Err(TransportError::SourceError(e)),
        }
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, TransportError> {
        let start = self.offset;
        let mut len = [0u8; 1];
        if read_full(&mut self.source, &mut len).map_err(TransportError::SourceError)? == 0 {
            return Ok(None);
        }
        if len[0] == 0 {
            return Err(TransportError::EmptyFrame(start));
        }
        let mut payload = vec![0u8; usize::from(len[0])];
        let got = read_full(&mut self.source, &mut payload).map_err(TransportError::SourceError)?;
        if got < payload.len() {
            return Err(TransportError::TruncatedFrame(start));
        }
        self.offset += 1 + payload.len();
        Ok(Some(Frame(payload)))
    }
}

/// Like `read_exact`, but reports how much was read before end of stream.
fn read_full(source: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads a framed stream back into payloads.
pub fn read_stream(source: impl Read) -> Result<Vec<Vec<u8>>, TransportError> {
    let mut reader = FrameReader::open(source)?;
    let mut payloads = Vec::new();
    while let Some(frame) = reader.next_frame()? {
        payloads.push(frame.into_payload());
    }
    Ok(payloads)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PushOutcome {
    pub accepted: bool,
    /// First drop of a contiguous run of drops.
    pub loss_event: bool,
}

/// Fixed-capacity frame queue that drops on overflow.
#[derive(Clone, Debug)]
pub struct BoundedFifo<T = Frame> {
    capacity: usize,
    queue: VecDeque<T>,
    dropped: u64,
    dropping: bool,
}

impl<T> BoundedFifo<T> {
    pub const DEFAULT_CAPACITY: usize = 64;

    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            queue: VecDeque::with_capacity(capacity),
            dropped: 0,
            dropping: false,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() >= self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn push(&mut self, item: T) -> PushOutcome {
        if self.is_full() {
            self.dropped += 1;
            let loss_event = !self.dropping;
            self.dropping = true;
            return PushOutcome {
                accepted: false,
                loss_event,
            };
        }
        self.queue.push_back(item);
        self.dropping = false;
        PushOutcome {
            accepted: true,
            loss_event: false,
        }
    }

    pub fn pop(&mut self) -> Option<T> {
        self.queue.pop_front()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CollectSummary {
    pub frames: usize,
    pub bytes: usize,
}

/// A bound collector socket, waiting for one sender.
pub struct Collector {
    listener: TcpListener,
}

impl Collector {
    pub fn bind(endpoint: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(endpoint)
            .map_err(|e| TransportError::ConnectionFailed(format!("bind: {e}")))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        self.listener
            .local_addr()
            .map_err(|e| TransportError::ConnectionFailed(e.to_string()))
    }

    /// Accepts one connection and copies its frames to `sink` as they
    /// arrive. On a truncated stream every complete frame is kept.
    pub fn serve(self, mut sink: impl Write, timeout: Duration) -> Result<CollectSummary, TransportError> {
        let stream = self.accept(timeout)?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| TransportError::ConnectionFailed(e.to_string()))?;
        let mut reader = FrameReader::open(stream).map_err(timed_out)?;
        sink.write_all(MAGIC).map_err(TransportError::SinkError)?;
        let mut summary = CollectSummary {
            frames: 0,
            bytes: MAGIC.len(),
        };
        let result = loop {
            match reader.next_frame().map_err(timed_out) {
                Ok(Some(frame)) => {
                    frame.write_to(&mut sink).map_err(TransportError::SinkError)?;
                    summary.frames += 1;
                    summary.bytes += frame.wire_len();
                }
                Ok(None) => break Ok(summary),
                Err(e) => break Err(e),
            }
        };
        sink.flush().map_err(TransportError::SinkError)?;
        result
    }

    fn accept(&self, timeout: Duration) -> Result<TcpStream, TransportError> {
        let failed = |e: io::Error| TransportError::ConnectionFailed(e.to_string());
        self.listener.set_nonblocking(true).map_err(failed)?;
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).map_err(failed)?;
                    return Ok(stream);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::ConnectionFailed(
                            "no sender connected before the timeout".into(),
                        ));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(failed(e)),
            }
        }
    }
}

fn timed_out(e: TransportError) -> TransportError {
    match e {
        TransportError::SourceError(io)
            if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
        {
            TransportError::ConnectionFailed("sender went quiet".into())
        }
        other => other,
    }
}

pub fn serve_collector(
    endpoint: impl ToSocketAddrs,
    sink: impl Write,
    timeout: Duration,
) -> Result<CollectSummary, TransportError> {
    Collector::bind(endpoint)?.serve(sink, timeout)
}

/// Connects to a collector and streams the frames.
pub fn send_frames(endpoint: impl ToSocketAddrs, frames: &[Frame]) -> Result<usize, TransportError> {
    let stream = TcpStream::connect(endpoint)
        .map_err(|e| TransportError::ConnectionFailed(format!("connect: {e}")))?;
    let n = write_frames(frames, io::BufWriter::new(&stream))?;
    stream
        .shutdown(std::net::Shutdown::Write)
        .map_err(TransportError::SinkError)?;
    Ok(n)
}
