//! Binary trace layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic "KVTRACE1"
//!      8     4  version (u32, currently 1)
//!     12     4  flags (u32; bit 0 post-RoPE keys, bit 1 replicated KV heads)
//!     16     4  num_layers (u32)
//!     20     4  num_heads (u32)
//!     24     4  head_dim (u32)
//!     28     4  prompt_len (u32)
//!     32     4  total_len (u32)
//!     36     4  model_name byte length n (u32)
//!     40     n  model_name, UTF-8
//!   40+n     *  payload
//! ```
//!
//! The payload holds one block per (layer, head) in layer-major, head-minor
//! order. Each block is Q, then K, then V, each `total_len * head_dim`
//! row-major `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AttentionTrace, HeadTensors};
use crate::error::{Result, TraceParseError};
use crate::linalg::Matrix;

pub const TRACE_MAGIC: &[u8; 8] = b"KVTRACE1";
pub const TRACE_VERSION: u32 = 1;
const FIXED_HEADER_LEN: u64 = 40;

pub fn encode_trace(t: &AttentionTrace) -> Result<Vec<u8>> {
    t.validate()?;
    let name = t.model_name.as_bytes();
    let payload = t.heads.len() * 3 * t.total_len * t.head_dim * 8;
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN as usize + name.len() + payload);
    out.extend_from_slice(TRACE_MAGIC);
    for v in [
        TRACE_VERSION,
        t.flags,
        to_u32(t.num_layers)?,
        to_u32(t.num_heads)?,
        to_u32(t.head_dim)?,
        to_u32(t.prompt_len)?,
        to_u32(t.total_len)?,
        to_u32(name.len())?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(name);
    for h in &t.heads {
        for m in [&h.q, &h.k, &h.v] {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| {
        TraceParseError::InvalidHeader(format!("dimension {v} does not fit in u32")).into()
    })
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode_trace(bytes: &[u8]) -> std::result::Result<AttentionTrace, TraceParseError> {
    let actual = bytes.len() as u64;
    if actual < TRACE_MAGIC.len() as u64 {
        return Err(TraceParseError::Truncated {
            expected: FIXED_HEADER_LEN,
            actual,
        });
    }
    let magic: [u8; 8] = bytes[..8].try_into().unwrap();
    if &magic != TRACE_MAGIC {
        return Err(TraceParseError::BadMagic { found: magic });
    }
    if actual < FIXED_HEADER_LEN {
        return Err(TraceParseError::Truncated {
            expected: FIXED_HEADER_LEN,
            actual,
        });
    }
    let version = read_u32(bytes, 8);
    if version != TRACE_VERSION {
        return Err(TraceParseError::UnsupportedVersion {
            found: version,
            expected: TRACE_VERSION,
        });
    }
    let flags = read_u32(bytes, 12);
    let num_layers = read_u32(bytes, 16) as u64;
    let num_heads = read_u32(bytes, 20) as u64;
    let head_dim = read_u32(bytes, 24) as u64;
    let prompt_len = read_u32(bytes, 28) as u64;
    let total_len = read_u32(bytes, 32) as u64;
    let name_len = read_u32(bytes, 36) as u64;

    if num_layers == 0 || num_heads == 0 || head_dim == 0 {
        return Err(TraceParseError::InvalidHeader(format!(
            "zero dimension (layers={num_layers}, heads={num_heads}, head_dim={head_dim})"
        )));
    }
    if prompt_len == 0 || total_len < prompt_len {
        return Err(TraceParseError::InvalidHeader(format!(
            "need total_len >= prompt_len >= 1, got prompt_len={prompt_len} total_len={total_len}"
        )));
    }

    let expected = num_layers
        .checked_mul(num_heads)
        .and_then(|n| n.checked_mul(3))
        .and_then(|n| n.checked_mul(total_len))
        .and_then(|n| n.checked_mul(head_dim))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(FIXED_HEADER_LEN + name_len))
        .ok_or_else(|| TraceParseError::InvalidHeader("dimensions overflow".into()))?;
    if actual < expected {
        return Err(TraceParseError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(TraceParseError::TrailingBytes { expected, actual });
    }

    let name_start = FIXED_HEADER_LEN as usize;
    let name_end = name_start + name_len as usize;
    let model_name = std::str::from_utf8(&bytes[name_start..name_end])
        .map_err(|_| TraceParseError::InvalidHeader("model name is not UTF-8".into()))?
        .to_owned();

    let (num_layers, num_heads) = (num_layers as usize, num_heads as usize);
    let (head_dim, total_len) = (head_dim as usize, total_len as usize);
    let block = total_len * head_dim;
    let mut cursor = name_end;
    let mut next_matrix = |layer: usize, head: usize, tensor: &'static str| {
        let mut data = Vec::with_capacity(block);
        for chunk in bytes[cursor..cursor + block * 8].chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(TraceParseError::NonFinite {
                    layer,
                    head,
                    tensor,
                });
            }
            data.push(v);
        }
        cursor += block * 8;
        Ok(Matrix::new(total_len, head_dim, data).expect("finite, correctly sized block"))
    };

    let mut heads = Vec::with_capacity(num_layers * num_heads);
    for layer in 0..num_layers {
        for head in 0..num_heads {
            let q = next_matrix(layer, head, "Q")?;
            let k = next_matrix(layer, head, "K")?;
            let v = next_matrix(layer, head, "V")?;
            heads.push(HeadTensors { q, k, v });
        }
    }

    Ok(AttentionTrace {
        model_name,
        flags,
        num_layers,
        num_heads,
        head_dim,
        prompt_len: prompt_len as usize,
        total_len,
        heads,
    })
}

pub fn write_trace(t: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_trace(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let bytes = fs::read(path)?;
    Ok(decode_trace(&bytes)?)
}
