//! Shared binary container for parameter blobs: a 4-byte magic, a `u32`
//! dimension count, that many `u32` dimensions, then a `u32` payload length
//! and the payload as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write(mut w: impl Write, magic: &[u8; 4], dims: &[u32], payload: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * (dims.len() + payload.len()));
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    for &v in payload {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read(mut r: impl Read, magic: &[u8; 4]) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        cursor += n;
        Ok(s)
    };
    if take(4)? != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let ndims = u32_at(take(4)?) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(u32_at(take(4)?));
    }
    let len = u32_at(take(4)?) as usize;
    let raw = take(len * 4)?;
    let payload = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if cursor != bytes.len() {
        return Err(Error::Format("trailing bytes after container payload".into()));
    }
    Ok((dims, payload))
}
