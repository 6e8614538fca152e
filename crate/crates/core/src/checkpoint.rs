//! Binary checkpoint format.
//!
//! ```text
//! "SQAC"  u32 version
//! u32 len, JSON architecture record
//! u32 n_tensors, n × { u32 name_len, name, u32 rank, rank × u64 extent, f32 data }
//! u32 n_masks,   n × { u32 name_len, name, u64 len, ceil(len/8) bytes (LSB first) }
//! u32 n_bias,    n × { u32 id_len, id, f32 scale, f32 shift }, f32 scale, f32 shift (universal)
//! u32 CRC32 of everything before it
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::bias::{Affine, BiasTransform};
use crate::error::{Error, Result};
use crate::model::{QualityModel, StudentConfig};

pub const MAGIC: &[u8; 4] = b"SQAC";
pub const VERSION: u32 = 1;

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn to_bytes(model: &QualityModel) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let arch = serde_json::to_string(&model.config).map_err(|e| bad(e.to_string()))?;
    w.str(&arch);

    w.u32(model.params.len() as u32);
    for (_, p) in model.params.iter() {
        w.str(&p.name);
        w.u32(p.tensor.rank() as u32);
        for &e in p.tensor.shape() {
            w.u64(e as u64);
        }
        for &v in p.tensor.data() {
            w.f32(v);
        }
    }

    let masked: Vec<_> = model.params.iter().filter(|(_, p)| p.mask.is_some()).collect();
    w.u32(masked.len() as u32);
    for (_, p) in masked {
        let mask = p.mask.as_ref().expect("filtered");
        w.str(&p.name);
        w.u64(mask.len() as u64);
        w.0.extend_from_slice(&pack_bits(mask));
    }

    w.u32(model.bias.per_dataset.len() as u32);
    for (id, t) in &model.bias.per_dataset {
        w.str(id);
        w.f32(t.scale);
        w.f32(t.shift);
    }
    w.f32(model.bias.universal.scale);
    w.f32(model.bias.universal.shift);

    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<QualityModel> {
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(bad("not a checkpoint (missing SQAC magic)"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC mismatch; file is corrupt"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let config: StudentConfig =
        serde_json::from_str(&r.str()?).map_err(|e| bad(format!("architecture record: {e}")))?;
    // Parameters are rebuilt from the architecture, then overwritten, so
    // ordering and optimizer flags always match a fresh model.
    let mut model = QualityModel::new(config, 0)?;

    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(bad(format!("{n} tensors, architecture has {}", model.params.len())));
    }
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let p = model
            .params
            .by_name_mut(&name)
            .map_err(|_| bad(format!("unexpected tensor `{name}`")))?;
        if p.tensor.shape() != shape.as_slice() {
            return Err(bad(format!("`{name}`: shape {shape:?}, expected {:?}", p.tensor.shape())));
        }
        let raw = r.take(4 * p.tensor.numel())?;
        for (dst, src) in p.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }

    let n = r.u32()? as usize;
    for _ in 0..n {
        let name = r.str()?;
        let len = r.u64()? as usize;
        let p = model
            .params
            .by_name_mut(&name)
            .map_err(|_| bad(format!("mask for unknown tensor `{name}`")))?;
        if len != p.tensor.numel() {
            return Err(bad(format!("`{name}`: mask of {len} for {} weights", p.tensor.numel())));
        }
        let bytes = r.take(len.div_ceil(8))?;
        p.mask = Some(unpack_bits(bytes, len));
        let dirty = p
            .tensor
            .data()
            .iter()
            .zip(p.mask.as_ref().unwrap())
            .any(|(w, keep)| !keep && *w != 0.0);
        if dirty {
            return Err(bad(format!("`{name}`: masked weights are not zero")));
        }
    }

    let n = r.u32()? as usize;
    let mut bias = BiasTransform::identity();
    for _ in 0..n {
        let id = r.str()?;
        let t = Affine::new(r.f32()?, r.f32()?);
        bias.per_dataset.insert(id, t);
    }
    bias.universal = Affine::new(r.f32()?, r.f32()?);
    bias.validate().map_err(|e| bad(e.to_string()))?;
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    model.bias = bias;
    Ok(model)
}

pub fn save(model: &QualityModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<QualityModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn model() -> QualityModel {
        let mut m = QualityModel::new(presets::tiny_student(), 5).unwrap();
        m.bias.per_dataset.insert("a".into(), Affine::new(1.25, -0.5));
        m.bias.universal = Affine::new(0.8, 0.1);
        let p = m.params.by_name_mut("conv1.w").unwrap();
        let mask: Vec<bool> = (0..p.tensor.numel()).map(|i| i % 3 != 0).collect();
        p.mask = Some(mask);
        p.apply_mask();
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let a = to_bytes(&m).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.bias, m.bias);
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn corruption_detected() {
        let mut a = to_bytes(&model()).unwrap();
        let mid = a.len() / 2;
        a[mid] ^= 0x10;
        assert!(matches!(from_bytes(&a), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"nope").is_err());
        let a = to_bytes(&model()).unwrap();
        assert!(from_bytes(&a[..a.len() - 9]).is_err());
    }

    #[test]
    fn bit_packing_round_trips() {
        let bits: Vec<bool> = (0..19).map(|i| i % 5 == 1 || i == 18).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 3);
        assert_eq!(packed[0], 0b0100_0010);
        assert_eq!(unpack_bits(&packed, 19), bits);
    }
}
