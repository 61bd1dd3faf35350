//! `FSEQ` feature files: 16-byte little-endian header then `T·F` f32 values.

use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FSEQ_MAGIC: &[u8; 4] = b"FSEQ";
pub const FSEQ_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Values are narrowed to `f32`.
pub fn encode_fseq(seq: &FeatureSequence) -> Vec<u8> {
    let (t, f) = (seq.len(), seq.channels());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(FSEQ_MAGIC);
    out.extend_from_slice(&FSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in seq.frames().data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fseq(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "feature file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FSEQ_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FSEQ_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let (t, f) = (word(8) as usize, word(12) as usize);
    if t == 0 || f == 0 {
        return Err(Error::Format(format!("empty feature sequence {t}x{f}")));
    }
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("feature dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    FeatureSequence::new(Tensor::matrix(t, f, data)?, None)
}

pub fn read_fseq(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fseq(&bytes)
}

pub fn write_fseq(path: &Path, seq: &FeatureSequence) -> Result<()> {
    std::fs::write(path, encode_fseq(seq)).map_err(|e| Error::io(path, e))
}
