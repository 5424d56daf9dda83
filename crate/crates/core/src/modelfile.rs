//! Binary model container. All integers and floats are little-endian.
//!
//! ```text
//! magic        b"MWDL"
//! version      u32                      (= 1)
//! config       14 × u32                 NetworkConfig fields in declaration order
//! pqmf         u32 bands, u32 order, f64 beta, f64 cutoff
//! count        u32                      number of tensor records
//! record       u16 name length, name (UTF-8),
//!              u8 rank, rank × u32 dims,
//!              u8 dtype (0 = f32),
//!              u8 layout (0 = dense, 1 = block-sparse 16×1)
//!   dense:     product(dims) × f32, row-major
//!   sparse:    u32 block count, then per block u32 row-block, u32 column,
//!              then 16 × f32 per block in the same order
//! trailer      u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! The recurrent matrix of the sparse GRU is stored block-sparse when it has a
//! mask; every other tensor is dense.

use std::path::Path;

use rand::SeedableRng;

use crate::dsp::PqmfConfig;
use crate::error::{Error, Result};
use crate::model::{BlockMask, BlockSparse, ModelParams, NetworkConfig, BLOCK_ROWS, SPARSE_TENSOR};
use crate::real::Real;

pub const MAGIC: [u8; 4] = *b"MWDL";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const LAYOUT_DENSE: u8 = 0;
const LAYOUT_BLOCK_SPARSE: u8 = 1;

/// Everything the engine needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParams<f32>,
    pub pqmf: PqmfConfig,
}

fn config_fields(c: &NetworkConfig) -> [u32; 14] {
    [
        c.sample_rate,
        c.frame_shift as u32,
        c.bands as u32,
        c.lp_order as u32,
        c.cond_dim as u32,
        c.segconv_prev as u32,
        c.segconv_next as u32,
        c.cond_proj as u32,
        c.embed_dim as u32,
        c.sparse_units as u32,
        c.dense_units as u32,
        c.head_bins as u32,
        c.logit_latent as u32,
        c.residual_hidden as u32,
    ]
}

fn config_from(f: &[u32; 14]) -> NetworkConfig {
    let u = |i: usize| f[i] as usize;
    NetworkConfig {
        sample_rate: f[0],
        frame_shift: u(1),
        bands: u(2),
        lp_order: u(3),
        cond_dim: u(4),
        segconv_prev: u(5),
        segconv_next: u(6),
        cond_proj: u(7),
        embed_dim: u(8),
        sparse_units: u(9),
        dense_units: u(10),
        head_bins: u(11),
        logit_latent: u(12),
        residual_hidden: u(13),
    }
}

/// Serializes `params` (cast to `f32`) and the PQMF design.
pub fn to_bytes<F: Real>(params: &ModelParams<F>, pqmf: &PqmfConfig) -> Result<Vec<u8>> {
    params.validate()?;
    pqmf.validate()?;
    if pqmf.bands != params.cfg.bands {
        return Err(Error::shape("PQMF bands", params.cfg.bands, pqmf.bands));
    }
    let p: ModelParams<f32> = params.cast();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_fields(&p.cfg) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(pqmf.bands as u32).to_le_bytes());
    out.extend_from_slice(&(pqmf.order as u32).to_le_bytes());
    out.extend_from_slice(&pqmf.beta.to_le_bytes());
    out.extend_from_slice(&pqmf.cutoff.to_le_bytes());
    let tensors = p.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        match (&p.sparse_gru.mask, t.name == SPARSE_TENSOR) {
            (Some(mask), true) => {
                let w = &p.sparse_gru.w_rec;
                let dropped = (0..w.rows).any(|r| (0..w.cols).any(|c| !mask.covers(r, c) && w.at(r, c) != 0.0));
                if dropped {
                    return Err(Error::Format(format!("{SPARSE_TENSOR} has nonzero values outside its mask")));
                }
                out.push(LAYOUT_BLOCK_SPARSE);
                let s = BlockSparse::from_masked(w, mask);
                out.extend_from_slice(&(s.blocks() as u32).to_le_bytes());
                for rb in 0..mask.row_blocks() {
                    for b in s.row_ptr[rb]..s.row_ptr[rb + 1] {
                        out.extend_from_slice(&(rb as u32).to_le_bytes());
                        out.extend_from_slice(&s.col_idx[b as usize].to_le_bytes());
                    }
                }
                for v in &s.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                out.push(LAYOUT_DENSE);
                for v in t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, out: &mut [f32]) -> Result<()> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

/// Parses a container; the checksum is verified before anything else is read.
pub fn from_bytes(buf: &[u8]) -> Result<ModelFile> {
    if buf.len() < 12 {
        return Err(Error::Format("file too short".into()));
    }
    if buf[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let mut fields = [0u32; 14];
    for f in fields.iter_mut() {
        *f = r.u32()?;
    }
    let cfg = config_from(&fields);
    cfg.validate()?;
    let pqmf = PqmfConfig {
        bands: r.u32()? as usize,
        order: r.u32()? as usize,
        beta: r.f64()?,
        cutoff: r.f64()?,
    };
    pqmf.validate()?;

    // Any initial values work; every tensor is overwritten below.
    let mut params = ModelParams::<f32>::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    let expected = params.tensors().len();
    if count != expected {
        return Err(Error::shape("tensor count", expected, count));
    }
    let mut mask = None;
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != t.name {
            return Err(Error::Format(format!("record {i}: expected tensor {}, found {name}", t.name)));
        }
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims != t.shape {
            return Err(Error::Format(format!("{name}: shape {dims:?}, expected {:?}", t.shape)));
        }
        if r.u8()? != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unsupported dtype")));
        }
        match r.u8()? {
            LAYOUT_DENSE => r.f32s(t.data.len(), t.data)?,
            LAYOUT_BLOCK_SPARSE if name == SPARSE_TENSOR => {
                let (rows, cols) = (dims[0], dims[1]);
                let blocks = r.u32()? as usize;
                if blocks > rows / BLOCK_ROWS * cols {
                    return Err(Error::Format(format!("{name}: {blocks} blocks exceed the matrix")));
                }
                let mut m = BlockMask {
                    rows,
                    cols,
                    keep: vec![false; rows / BLOCK_ROWS * cols],
                };
                let mut pos = Vec::with_capacity(blocks);
                for _ in 0..blocks {
                    let (rb, c) = (r.u32()? as usize, r.u32()? as usize);
                    if rb >= rows / BLOCK_ROWS || c >= cols {
                        return Err(Error::Format(format!("{name}: block ({rb}, {c}) out of range")));
                    }
                    m.keep[rb * cols + c] = true;
                    pos.push((rb, c));
                }
                t.data.fill(0.0);
                let mut vals = [0.0f32; BLOCK_ROWS];
                for (rb, c) in pos {
                    r.f32s(BLOCK_ROWS, &mut vals)?;
                    for (i, v) in vals.iter().enumerate() {
                        t.data[(rb * BLOCK_ROWS + i) * cols + c] = *v;
                    }
                }
                mask = Some(m);
            }
            l => return Err(Error::Format(format!("{name}: unsupported layout {l}"))),
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    params.sparse_gru.mask = mask;
    params.validate()?;
    Ok(ModelFile { params, pqmf })
}

pub fn save<F: Real>(params: &ModelParams<F>, pqmf: &PqmfConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params, pqmf)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::prune_gru;

    fn toy(sparse: bool) -> ModelParams<f32> {
        let mut p = ModelParams::<f32>::init(NetworkConfig::toy_16k(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        if sparse {
            prune_gru(&mut p.sparse_gru, [0.2, 0.3, 0.4], true).unwrap();
            p.apply_masks();
        } else {
            p.sparse_gru.mask = None;
        }
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let pq = PqmfConfig::nominal_16k();
        for sparse in [false, true] {
            let p = toy(sparse);
            let back = from_bytes(&to_bytes(&p, &pq).unwrap()).unwrap();
            assert_eq!(back.pqmf, pq);
            assert_eq!(back.params.cfg, p.cfg);
            assert_eq!(back.params.sparse_gru.mask, p.sparse_gru.mask);
            for (a, b) in back.params.tensors().iter().zip(p.tensors()) {
                assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
            }
        }
    }

    #[test]
    fn sparse_storage_is_smaller() {
        let pq = PqmfConfig::nominal_16k();
        let dense = to_bytes(&toy(false), &pq).unwrap().len();
        let sparse = to_bytes(&toy(true), &pq).unwrap().len();
        assert!(sparse < dense);
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let bytes = to_bytes(&toy(true), &PqmfConfig::nominal_16k()).unwrap();
        for i in (0..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(from_bytes(&b).is_err(), "byte {i}");
        }
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_errors() {
        let pq = PqmfConfig::nominal_16k();
        let mut b = to_bytes(&toy(false), &pq).unwrap();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
        let mut b = to_bytes(&toy(false), &pq).unwrap();
        b[4] = 2;
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(Error::Version(2))));
        assert!(from_bytes(b"MWDL").is_err());
    }

    #[test]
    fn off_mask_values_are_rejected() {
        let mut p = toy(true);
        let m = p.sparse_gru.mask.clone().unwrap();
        let c = (0..m.cols).find(|&c| !m.is_kept(0, c)).unwrap();
        p.sparse_gru.w_rec.data[c] = 1.0;
        assert!(to_bytes(&p, &PqmfConfig::nominal_16k()).is_err());
    }
}
