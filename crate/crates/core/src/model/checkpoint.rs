//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "AMCK" | version u8 | arch_len u32 | arch block | tensor_count u32
//! per tensor: name_len u16 | name | dtype u8 (0 = f32) | ndim u8 | dims u32* | payload
//! crc32 u32 over everything before it
//! ```
//!
//! Architecture block: window u32, patch u32, fusion u8, n_blocks u8,
//! encoder channels u32*, decoder channels u32*.

use std::fs;
use std::path::Path;

use super::{Architecture, FusionMode, ModelError, ModelParams};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"AMCK";
pub const FORMAT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub(crate) fn encode_architecture(arch: &Architecture) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(arch.window as u32).to_le_bytes());
    out.extend_from_slice(&(arch.patch as u32).to_le_bytes());
    out.push(arch.fusion.tag());
    out.push(arch.channels.len() as u8);
    for &c in arch.channels.iter().chain(&arch.decoder_channels) {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>, ModelError> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let arch = encode_architecture(&params.arch);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

fn decode_architecture(r: &mut Reader) -> Result<Architecture, ModelError> {
    let window = r.u32()? as usize;
    let patch = r.u32()? as usize;
    let tag = r.u8()?;
    let fusion = FusionMode::from_tag(tag).ok_or_else(|| corrupt(format!("unknown fusion tag {tag}")))?;
    let blocks = r.u8()? as usize;
    let mut widths = Vec::with_capacity(2 * blocks);
    for _ in 0..2 * blocks {
        widths.push(r.u32()? as usize);
    }
    let decoder_channels = widths.split_off(blocks);
    Ok(Architecture {
        window,
        patch,
        channels: widths,
        decoder_channels,
        fusion,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing AMCK magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: bytes[4],
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 9 {
        return Err(corrupt("truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }

    let mut r = Reader { buf: body, pos: 5 };
    let arch_len = r.u32()? as usize;
    let arch_start = r.pos;
    let arch = decode_architecture(&mut r)?;
    if r.pos - arch_start != arch_len {
        return Err(corrupt("architecture block length mismatch"));
    }
    arch.validate().map_err(|e| corrupt(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor {name}: shape overflows")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("payload size overflows"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    let params = ModelParams { arch, tensors };
    params.validate().map_err(|e| match e {
        ModelError::InvalidArchitecture(m) => corrupt(m),
        other => other,
    })?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|e| ModelError::Io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let arch = Architecture {
            window: 2,
            patch: 8,
            channels: vec![3, 5],
            decoder_channels: vec![4, 2],
            fusion: FusionMode::Additive,
        };
        let mut p = ModelParams::init(&arch, 11).unwrap();
        // Non-trivial bit patterns, including subnormals and -0.0.
        let b = p.get_mut("dec.out.bias").unwrap();
        b.data_mut()[0] = -0.0;
        p.get_mut("dec.0.conv.bias").unwrap().data_mut()[1] = f32::from_bits(1);
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = params();
        let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(back.arch, p.arch);
        for ((n1, t1), (n2, t2)) in p.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amck");
        let p = params();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn truncation_and_bitflips_are_corrupt() {
        let bytes = encode_checkpoint(&params()).unwrap();
        for cut in [0, 3, 5, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, ModelError::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn unknown_version_is_reported() {
        let mut bytes = encode_checkpoint(&params()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(ModelError::VersionMismatch { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let p = params();
        let mut other = p.arch.clone();
        other.fusion = FusionMode::Gated;
        let q = ModelParams::init(&other, 11).unwrap();
        assert_ne!(p.fingerprint(), q.fingerprint());
    }
}
