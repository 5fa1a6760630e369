//! AMFL flow files: `"AMFL"`, `u32` height, `u32` width, then
//! `height * width` interleaved `(u, v)` pairs of little-endian `f32`.

use std::fs;
use std::path::Path;

use super::{FlowError, FlowField};
use crate::plane::Plane;

pub const MAGIC: &[u8; 4] = b"AMFL";
const HEADER_LEN: usize = 12;

pub fn encode(field: &FlowField) -> Vec<u8> {
    let (h, w) = field.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for (u, v) in field.u.data().iter().zip(field.v.data()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FlowField, FlowError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FlowError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FlowError::TruncatedFile {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(FlowError::InvalidInput(format!("header dimensions {h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(FlowError::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FlowError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for pair in bytes[HEADER_LEN..].chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    Ok(FlowField {
        u: Plane::new(h, w, u),
        v: Plane::new(h, w, v),
    })
}

pub fn load_flow(path: &Path) -> Result<FlowField, FlowError> {
    let bytes = fs::read(path).map_err(|e| FlowError::Io(path.display().to_string(), e))?;
    decode(&bytes)
}

pub fn save_flow(field: &FlowField, path: &Path) -> Result<(), FlowError> {
    fs::write(path, encode(field)).map_err(|e| FlowError::Io(path.display().to_string(), e))
}
