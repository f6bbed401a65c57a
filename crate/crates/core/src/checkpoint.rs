//! SMCK checkpoints.
//!
//! ```text
//! "SMCK" | version u32
//! metadata: length u32, UTF-8 `key=value` lines
//! tensor count u32
//! per tensor: name length u16 | name | rank u8 | dims u32 x rank | f32 data
//! ```
//!
//! All integers and floats are little-endian. The metadata carries the model
//! configuration and the training clip length so a checkpoint is
//! self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{DualPathModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SMCK_MAGIC: &[u8; 4] = b"SMCK";
pub const SMCK_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualPathModel,
    /// Training clip length; fast path and head reset every `clip_len` frames.
    pub clip_len: usize,
    pub extra: BTreeMap<String, String>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        context: "SMCK".into(),
        message: msg.into(),
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = ckpt.model.config().to_key_values();
    meta.insert("clip_len".into(), ckpt.clip_len.to_string());
    for (k, v) in &ckpt.extra {
        meta.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let meta_text = KeyValues(meta).to_string();
    let mut out = Vec::new();
    out.extend_from_slice(SMCK_MAGIC);
    out.extend_from_slice(&SMCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    let params = ckpt.model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SMCK_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != SMCK_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| fmt_err("metadata is not UTF-8"))?;
    let mut meta = KeyValues::parse(meta_text)?;
    let cfg = ModelConfig::from_key_values(&mut meta)?;
    let clip_len = meta.take_parsed("clip_len")?.unwrap_or(cfg.chunk_size);
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if store.id(name).is_some() {
            return Err(fmt_err(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = DualPathModel::from_params(cfg, store)?;
    Ok(Checkpoint {
        model,
        clip_len,
        extra: meta.0,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 5,
            layers: 1,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let model = DualPathModel::new(cfg(), 3).unwrap();
        let ckpt = Checkpoint {
            model,
            clip_len: 24,
            extra: BTreeMap::from([("epoch".to_string(), "7".to_string())]),
        };
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back.clip_len, 24);
        assert_eq!(back.extra.get("epoch").map(String::as_str), Some("7"));
        assert_eq!(back.model.config(), ckpt.model.config());
        for ((_, n1, a), (_, n2, b)) in ckpt.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // a second round trip is bit-exact
        let again = decode(&encode(&back).unwrap()).unwrap();
        assert_eq!(again.model.params(), back.model.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&Checkpoint {
            model: DualPathModel::new(cfg(), 1).unwrap(),
            clip_len: 8,
            extra: BTreeMap::new(),
        })
        .unwrap();
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        let mut b = bytes.clone();
        b.push(0);
        assert!(decode(&b).is_err());
        let mut b = bytes;
        b[4] = 9;
        assert!(decode(&b).is_err());
    }
}
