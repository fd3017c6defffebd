//! Frame codec of the socket backend.
//!
//! Every frame is length-prefixed; the body starts with the version byte:
//!
//! ```text
//! u64  body length (bytes that follow)
//! u8   version (= WIRE_VERSION)
//! u8   kind: 0 control, 1 fetch request, 2 data, 3 abort
//! u64  epoch (collective sequence number)
//! u64  sender logical clock
//! u32  name length, then the name bytes (UTF-8)
//! u32  phase
//! u32  block row I
//! u32  block col J
//! u64  payload count
//!      data frames: count little-endian f64 values
//!      control and abort frames: count bytes
//!      fetch requests: count = 0
//! ```
//!
//! Control payloads are bincode-encoded [`Envelope`](super::protocol::Envelope)s
//! (master to worker) or worker results (worker to master).

use std::io::{self, Read, Write};

use super::protocol::{Phase, Tag};

pub const WIRE_VERSION: u8 = 1;

/// Refuse bodies above this size rather than attempting the allocation.
const MAX_BODY: u64 = 1 << 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Control = 0,
    Fetch = 1,
    Data = 2,
    Abort = 3,
}

impl FrameKind {
    fn from_u8(b: u8) -> io::Result<Self> {
        Ok(match b {
            0 => FrameKind::Control,
            1 => FrameKind::Fetch,
            2 => FrameKind::Data,
            3 => FrameKind::Abort,
            other => return Err(invalid(format!("unknown frame kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Bytes(Vec<u8>),
    Floats(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub epoch: u64,
    pub clock: u64,
    pub tag: Tag,
    pub payload: Payload,
}

impl Frame {
    fn empty_tag() -> Tag {
        Tag { name: String::new(), phase: Phase(0), i: 0, j: 0 }
    }

    pub fn control(epoch: u64, bytes: Vec<u8>) -> Self {
        Frame { kind: FrameKind::Control, epoch, clock: 0, tag: Self::empty_tag(), payload: Payload::Bytes(bytes) }
    }

    pub fn fetch(epoch: u64, tag: Tag) -> Self {
        Frame { kind: FrameKind::Fetch, epoch, clock: 0, tag, payload: Payload::Bytes(Vec::new()) }
    }

    pub fn data(epoch: u64, clock: u64, tag: Tag, values: Vec<f64>) -> Self {
        Frame { kind: FrameKind::Data, epoch, clock, tag, payload: Payload::Floats(values) }
    }

    pub fn abort(epoch: u64, tag: Tag, reason: &str) -> Self {
        Frame { kind: FrameKind::Abort, epoch, clock: 0, tag, payload: Payload::Bytes(reason.as_bytes().to_vec()) }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        match self.payload {
            Payload::Bytes(b) => b,
            Payload::Floats(_) => Vec::new(),
        }
    }
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let name = frame.tag.name.as_bytes();
    let mut body = Vec::with_capacity(64 + name.len());
    body.push(WIRE_VERSION);
    body.push(frame.kind as u8);
    body.extend_from_slice(&frame.epoch.to_le_bytes());
    body.extend_from_slice(&frame.clock.to_le_bytes());
    body.extend_from_slice(&(name.len() as u32).to_le_bytes());
    body.extend_from_slice(name);
    body.extend_from_slice(&frame.tag.phase.0.to_le_bytes());
    body.extend_from_slice(&frame.tag.i.to_le_bytes());
    body.extend_from_slice(&frame.tag.j.to_le_bytes());
    match &frame.payload {
        Payload::Bytes(b) => {
            body.extend_from_slice(&(b.len() as u64).to_le_bytes());
            body.extend_from_slice(b);
        }
        Payload::Floats(v) => {
            body.extend_from_slice(&(v.len() as u64).to_le_bytes());
            body.reserve(v.len() * 8);
            for x in v {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(8 + body.len());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&encode(frame))?;
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(invalid("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(body: &[u8]) -> io::Result<Frame> {
    let mut c = Cursor { buf: body, pos: 0 };
    let version = c.u8()?;
    if version != WIRE_VERSION {
        return Err(invalid(format!("wire version {version}, expected {WIRE_VERSION}")));
    }
    let kind = FrameKind::from_u8(c.u8()?)?;
    let epoch = c.u64()?;
    let clock = c.u64()?;
    let name_len = c.u32()? as usize;
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|e| invalid(format!("tag name: {e}")))?
        .to_owned();
    let phase = Phase(c.u32()?);
    let i = c.u32()?;
    let j = c.u32()?;
    let count = c.u64()? as usize;
    let payload = match kind {
        FrameKind::Data => {
            let raw = c.take(count.checked_mul(8).ok_or_else(|| invalid("payload overflow".into()))?)?;
            Payload::Floats(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        }
        _ => Payload::Bytes(c.take(count)?.to_vec()),
    };
    if c.pos != body.len() {
        return Err(invalid("trailing bytes after payload".into()));
    }
    Ok(Frame { kind, epoch, clock, tag: Tag { name, phase, i, j }, payload })
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_BODY {
        return Err(invalid(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    decode(&body)
}
