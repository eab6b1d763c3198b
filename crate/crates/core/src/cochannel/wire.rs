use std::io::{self, Read, Write};

use crate::gcn::{CorrectionBundle, GcnConfig};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CCRR";
pub const WIRE_VERSION: u16 = 1;
/// Magic, version, kind, then n, D and h as u32.
pub const HEADER_LEN: usize = 19;
/// Upper bound on a length-prefixed frame.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Upload = 1,
    Correction = 2,
    Error = 3,
}

impl TryFrom<u8> for MessageKind {
    type Error = crate::Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Upload),
            2 => Ok(Self::Correction),
            3 => Ok(Self::Error),
            other => Err(Error::protocol(format!("unknown message kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    /// Hidden state (n×D) and the sender's head count.
    Upload { heads: usize, hidden: Tensor<f32> },
    /// Raw correction floats: `K_attn` heads (n×n each) then `K_b` heads (dh×n each).
    Correction { config: GcnConfig, payload: Vec<f32> },
    /// UTF-8 diagnostic; n, D and h are zero.
    Error(String),
}

fn header(kind: MessageKind, n: usize, d: usize, h: usize, payload_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_bytes);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(kind as u8);
    for v in [n, d, h] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

fn put_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_upload(hidden: &Tensor<f32>, heads: usize) -> Result<Vec<u8>> {
    let (n, d) = hidden.dims2()?;
    hidden.ensure_finite("upload")?;
    let mut out = header(MessageKind::Upload, n, d, heads, 4 * hidden.len());
    put_floats(&mut out, hidden.data());
    Ok(out)
}

/// Encodes the raw corrections of a bundle; the fusion scalars stay on the device.
pub fn encode_correction(bundle: &CorrectionBundle) -> Result<Vec<u8>> {
    let heads = bundle.k_attn.len();
    if heads == 0 || bundle.k_b.len() != heads {
        return Err(Error::protocol(format!(
            "bundle has {heads} attention and {} bias heads",
            bundle.k_b.len()
        )));
    }
    let n = bundle.k_attn[0].rows();
    let d: usize = bundle.k_b.iter().map(|k| k.rows()).sum();
    let flat = bundle.to_flat();
    let config = GcnConfig {
        seq_len: n,
        model_dim: d,
        heads,
        hidden: 0,
    };
    if flat.len() != config.payload_len() {
        return Err(Error::protocol("bundle heads have inconsistent shapes"));
    }
    bundle.ensure_finite()?;
    let mut out = header(MessageKind::Correction, n, d, heads, 4 * flat.len());
    put_floats(&mut out, &flat);
    Ok(out)
}

pub fn encode_error(message: &str) -> Vec<u8> {
    let mut out = header(MessageKind::Error, 0, 0, 0, message.len());
    out.extend_from_slice(message.as_bytes());
    out
}

fn u32_at(buf: &[u8], at: usize) -> usize {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]) as usize
}

pub fn decode(buf: &[u8]) -> Result<WireMessage> {
    if buf.len() < HEADER_LEN {
        return Err(Error::protocol(format!("message of {} bytes is shorter than the header", buf.len())));
    }
    if buf[..4] != MAGIC {
        return Err(Error::protocol(format!("bad magic {:02x?}", &buf[..4])));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != WIRE_VERSION {
        return Err(Error::protocol(format!("wire version {version}, expected {WIRE_VERSION}")));
    }
    let kind = MessageKind::try_from(buf[6])?;
    let (n, d, h) = (u32_at(buf, 7), u32_at(buf, 11), u32_at(buf, 15));
    let body = &buf[HEADER_LEN..];
    if kind == MessageKind::Error {
        return Ok(WireMessage::Error(String::from_utf8_lossy(body).into_owned()));
    }
    let floats = match kind {
        MessageKind::Upload => n.checked_mul(d),
        _ => h.checked_mul(n).and_then(|x| x.checked_mul(n)).and_then(|x| x.checked_add(n.checked_mul(d)?)),
    }
    .ok_or_else(|| Error::protocol("header dimensions overflow"))?;
    if body.len() != 4 * floats {
        return Err(Error::protocol(format!(
            "payload has {} bytes, header implies {}",
            body.len(),
            4 * floats
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::protocol("payload contains non-finite values"));
    }
    match kind {
        MessageKind::Upload => Ok(WireMessage::Upload {
            heads: h,
            hidden: Tensor::new(vec![n, d], values)?,
        }),
        _ => {
            if h == 0 || d % h != 0 {
                return Err(Error::protocol(format!("model dim {d} is not divisible by {h} heads")));
            }
            Ok(WireMessage::Correction {
                config: GcnConfig {
                    seq_len: n,
                    model_dim: d,
                    heads: h,
                    hidden: 0,
                },
                payload: values,
            })
        }
    }
}

pub fn decode_upload(buf: &[u8]) -> Result<(Tensor<f32>, usize)> {
    match decode(buf)? {
        WireMessage::Upload { heads, hidden } => Ok((hidden, heads)),
        WireMessage::Error(msg) => Err(Error::protocol(format!("peer error: {msg}"))),
        WireMessage::Correction { .. } => Err(Error::protocol("expected an upload, got a correction")),
    }
}

/// Decodes a correction and attaches the device's fusion scalars.
pub fn decode_correction(buf: &[u8], p: f32, q: f32) -> Result<CorrectionBundle> {
    match decode(buf)? {
        WireMessage::Correction { config, payload } => CorrectionBundle::from_flat(&config, &payload, p, q),
        WireMessage::Error(msg) => Err(Error::protocol(format!("peer error: {msg}"))),
        WireMessage::Upload { .. } => Err(Error::protocol("expected a correction, got an upload")),
    }
}

/// Writes `msg` with a u32 little-endian length prefix.
pub fn write_frame(w: &mut impl Write, msg: &[u8]) -> io::Result<()> {
    w.write_all(&(msg.len() as u32).to_le_bytes())?;
    w.write_all(msg)?;
    w.flush()
}

/// Reads one length-prefixed frame; `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::protocol(format!("frame of {len} bytes exceeds {MAX_FRAME_LEN}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}
