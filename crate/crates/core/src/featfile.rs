//! Feature file: `b"MWFE"`, `u32` frame count, `u32` dimension, then
//! `frames × dim` little-endian `f32` values, frame-major.

use std::path::Path;

use crate::dsp::MelFrameSeq;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MWFE";

pub fn to_bytes(frames: &MelFrameSeq) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * frames.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(frames.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.dim as u32).to_le_bytes());
    for v in &frames.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<MelFrameSeq> {
    if buf.len() < 12 || buf[..4] != MAGIC {
        return Err(Error::Format("not a feature file".into()));
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let want = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("feature header overflows".into()))?;
    if buf.len() - 12 != want {
        return Err(Error::Format(format!(
            "feature payload is {} bytes, header says {want}",
            buf.len() - 12
        )));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelFrameSeq::new(dim, data)
}

pub fn save(frames: &MelFrameSeq, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(frames)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MelFrameSeq> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let f = MelFrameSeq::new(3, vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap();
        let b = to_bytes(&f);
        assert_eq!(&b[..12], b"MWFE\x02\0\0\0\x03\0\0\0");
        assert_eq!(from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn rejects_bad_input() {
        let b = to_bytes(&MelFrameSeq::new(2, vec![1.0; 4]).unwrap());
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        assert!(from_bytes(b"MWDL\0\0\0\0\0\0\0\0").is_err());
        let mut huge = b[..12].to_vec();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(from_bytes(&huge).is_err());
    }
}
