//! Frame layout, all integers little-endian:
//!
//! ```text
//! FE 5B | version u8 | type u8 | payload length u32 | payload | CRC32 u32
//! ```
//!
//! The CRC covers the header and payload. Tensors are encoded as rank u32,
//! dims u32 each, dtype tag u8, then raw elements.

use std::io::Read;

use super::{ProtocolMessage, TransportError, WireDtype, WireTensor};
use crate::autodiff::{Real, Tensor};

pub const FRAME_MAGIC: [u8; 2] = [0xFE, 0x5B];
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 << 20;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &WireTensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.0.push(t.dtype().tag());
        match t.dtype() {
            WireDtype::F32 => t.tensor().data().iter().for_each(|&v| self.0.extend_from_slice(&(v as f32).to_le_bytes())),
            WireDtype::F64 => t.tensor().data().iter().for_each(|&v| self.0.extend_from_slice(&(v as f64).to_le_bytes())),
        }
    }

    fn tensors(&mut self, ts: &[WireTensor]) {
        self.u32(ts.len() as u32);
        ts.iter().for_each(|t| self.tensor(t));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TransportError::Malformed(format!("payload ends before a {n}-byte field at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<WireTensor, TransportError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(TransportError::Malformed(format!("tensor rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let tag = self.take(1)?[0];
        let dtype = WireDtype::from_tag(tag).ok_or_else(|| TransportError::Malformed(format!("unknown dtype tag {tag}")))?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes = count
            .and_then(|c| c.checked_mul(dtype.width()))
            .ok_or_else(|| TransportError::Malformed(format!("tensor shape {shape:?} overflows")))?;
        let raw = self.take(bytes)?;
        let data: Vec<Real> = match dtype {
            WireDtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real).collect(),
            WireDtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()) as Real).collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| TransportError::Malformed(e.to_string()))?;
        Ok(WireTensor::new(tensor, dtype))
    }

    fn tensors(&mut self) -> Result<Vec<WireTensor>, TransportError> {
        let n = self.u32()? as usize;
        // Each tensor needs at least five bytes, which bounds the allocation.
        if n > self.buf.len() / 5 {
            return Err(TransportError::Malformed(format!("tensor count {n} exceeds payload")));
        }
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn payload(msg: &ProtocolMessage) -> Vec<u8> {
    use ProtocolMessage::*;
    let mut w = Writer(Vec::new());
    match msg {
        SmashedUpload { client, round, batch, h: t }
        | ClsTokenDown { client, round, batch, b: t }
        | TailGradUp { client, round, batch, grad: t }
        | HeadGradDown { client, round, batch, grad: t } => {
            w.u32(*client);
            w.u32(*round);
            w.u32(*batch);
            w.tensor(t);
        }
        PseudoTokenDown { client, round, batch, sampled, b } => {
            w.u32(*client);
            w.u32(*round);
            w.u32(*batch);
            w.u32(*sampled);
            w.tensor(b);
        }
        ParamsUpload { client, round, head, tail } => {
            w.u32(*client);
            w.u32(*round);
            w.tensors(head);
            w.tensors(tail);
        }
        UnifyBroadcast { round, head, tail } => {
            w.u32(*round);
            w.tensors(head);
            w.tensors(tail);
        }
        RoundEnd { round } => w.u32(*round),
        Error { code, detail } => {
            w.u32(*code);
            w.u32(detail.len() as u32);
            w.0.extend_from_slice(detail.as_bytes());
        }
    }
    w.0
}

fn parse_payload(kind: u8, buf: &[u8]) -> Result<ProtocolMessage, TransportError> {
    use ProtocolMessage::*;
    let mut r = Reader { buf, pos: 0 };
    let msg = match kind {
        1 | 3 | 4 | 5 => {
            let (client, round, batch) = (r.u32()?, r.u32()?, r.u32()?);
            let t = r.tensor()?;
            match kind {
                1 => SmashedUpload { client, round, batch, h: t },
                3 => ClsTokenDown { client, round, batch, b: t },
                4 => TailGradUp { client, round, batch, grad: t },
                _ => HeadGradDown { client, round, batch, grad: t },
            }
        }
        2 => PseudoTokenDown { client: r.u32()?, round: r.u32()?, batch: r.u32()?, sampled: r.u32()?, b: r.tensor()? },
        6 => UnifyBroadcast { round: r.u32()?, head: r.tensors()?, tail: r.tensors()? },
        7 => RoundEnd { round: r.u32()? },
        8 => {
            let code = r.u32()?;
            let len = r.u32()? as usize;
            let detail = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| TransportError::Malformed(e.to_string()))?;
            Error { code, detail }
        }
        9 => ParamsUpload { client: r.u32()?, round: r.u32()?, head: r.tensors()?, tail: r.tensors()? },
        other => return Err(TransportError::UnknownType(other)),
    };
    if r.pos != buf.len() {
        return Err(TransportError::Malformed(format!("{} unread payload bytes", buf.len() - r.pos)));
    }
    Ok(msg)
}

/// Serializes one message into a complete frame.
pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let body = payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(msg.type_code());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Encodes and enforces the payload limit.
pub fn encode_checked(msg: &ProtocolMessage, max_payload: usize) -> Result<Vec<u8>, TransportError> {
    let frame = encode(msg);
    let len = frame.len() - HEADER_LEN - 4;
    if len > max_payload || u32::try_from(len).is_err() {
        return Err(TransportError::Oversize { len, max: max_payload });
    }
    Ok(frame)
}

fn check_header(header: &[u8], max_payload: usize) -> Result<(u8, usize), TransportError> {
    if header[..2] != FRAME_MAGIC {
        return Err(TransportError::BadMagic([header[0], header[1]]));
    }
    if header[2] != FRAME_VERSION {
        return Err(TransportError::BadVersion(header[2]));
    }
    let len = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if len > max_payload {
        return Err(TransportError::Oversize { len, max: max_payload });
    }
    Ok((header[3], len))
}

fn finish(header: &[u8], body: &[u8], crc: &[u8]) -> Result<ProtocolMessage, TransportError> {
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header);
    hasher.update(body);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(TransportError::Checksum { stored, computed });
    }
    parse_payload(header[3], body)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, TransportError> {
    decode_with_limit(bytes, DEFAULT_MAX_PAYLOAD)
}

pub fn decode_with_limit(bytes: &[u8], max_payload: usize) -> Result<ProtocolMessage, TransportError> {
    if bytes.len() < 2 || bytes[..2] != FRAME_MAGIC {
        let mut m = [0; 2];
        m[..bytes.len().min(2)].copy_from_slice(&bytes[..bytes.len().min(2)]);
        return Err(TransportError::BadMagic(m));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TransportError::Truncated { expected: HEADER_LEN + 4, actual: bytes.len() });
    }
    let (_, len) = check_header(&bytes[..HEADER_LEN], max_payload)?;
    let total = HEADER_LEN + len + 4;
    if bytes.len() < total {
        return Err(TransportError::Truncated { expected: total, actual: bytes.len() });
    }
    if bytes.len() > total {
        return Err(TransportError::Malformed(format!("{} bytes after the frame", bytes.len() - total)));
    }
    finish(&bytes[..HEADER_LEN], &bytes[HEADER_LEN..HEADER_LEN + len], &bytes[HEADER_LEN + len..])
}

/// Reads one frame. A clean end of stream before any byte is a disconnect;
/// an end inside a frame is truncation.
pub fn read_frame(reader: &mut impl Read, max_payload: usize) -> Result<ProtocolMessage, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let got = fill(reader, &mut header)?;
    if got == 0 {
        return Err(TransportError::Disconnected);
    }
    if got < HEADER_LEN {
        return Err(TransportError::Truncated { expected: HEADER_LEN + 4, actual: got });
    }
    let (_, len) = check_header(&header, max_payload)?;
    let mut rest = vec![0u8; len + 4];
    let got_rest = fill(reader, &mut rest)?;
    if got_rest < rest.len() {
        return Err(TransportError::Truncated { expected: HEADER_LEN + len + 4, actual: HEADER_LEN + got_rest });
    }
    finish(&header, &rest[..len], &rest[len..])
}

fn fill(reader: &mut impl Read, buf: &mut [u8]) -> Result<usize, TransportError> {
    let mut n = 0;
    while n < buf.len() {
        match reader.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(TransportError::from_io(e)),
        }
    }
    Ok(n)
}
