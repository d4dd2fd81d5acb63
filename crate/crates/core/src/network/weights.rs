//! Weight files.
//!
//! Little-endian layout: magic `CYNW`, format version (u16), entry count
//! (u32), then per entry: name length (u16), UTF-8 name, rank (u8), one u32
//! per dimension, and the values as f32.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"CYNW";
pub const WEIGHT_VERSION: u16 = 1;

pub fn encode_weights(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::WeightFormat(format!("truncated file: needed {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file into named tensors in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&WEIGHT_MAGIC[..]) {
        return Err(Error::WeightFormat("bad magic, not a weight file".into()));
    }
    let version = r.u16()?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::WeightFormat("entry name is not UTF-8".into()))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| Error::WeightFormat(format!("{name}: shape overflow")))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightFormat(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Copies decoded entries into `model`. Every parameter must be present
/// with the same shape and no extra entries are allowed; nothing is
/// assigned unless all checks pass.
pub fn assign_weights(model: &mut Model<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut by_name: HashMap<String, Tensor<f32>> = HashMap::with_capacity(entries.len());
    for (name, t) in entries {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::WeightFormat(format!("duplicate entry {name}")));
        }
    }
    for p in model.params.iter() {
        match by_name.get(&p.name) {
            None => return Err(Error::WeightFormat(format!("missing entry {}", p.name))),
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::ShapeMismatch(format!(
                    "{}: file has {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if by_name.len() != model.params.len() {
        let mut extra: Vec<_> = by_name.keys().filter(|k| !model.params.iter().any(|p| &p.name == *k)).collect();
        extra.sort();
        return Err(Error::ShapeMismatch(format!("file has entries the model lacks: {extra:?}")));
    }
    for p in model.params.iter_mut() {
        p.value = by_name.remove(&p.name).expect("checked above");
    }
    Ok(())
}

pub fn save_weights(model: &Model<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn load_weights(model: &mut Model<f32>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let entries = decode_weights(&bytes).map_err(|e| match e {
        Error::WeightFormat(m) => Error::WeightFormat(format!("{}: {m}", path.display())),
        other => other,
    })?;
    assign_weights(model, entries)
}
