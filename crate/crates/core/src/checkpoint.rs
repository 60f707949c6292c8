//! Versioned binary model container.
//!
//! Layout (little endian): magic `BRDSCKPT`, `u32` version, then
//! length-prefixed UTF-8 blocks for the model config (`key=value` lines) and
//! the vocabulary (`category,token` lines), a `u32` tensor count and per
//! tensor: name, `u32` rank, `u64` extents, `f64` values in row-major order.

use std::path::Path;

use crate::birads::DescriptorVocabulary;
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BRDSCKPT";
pub const VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend((bytes.len() as u64).to_le_bytes());
    out.extend(bytes);
}

pub fn to_bytes(model: &DualBranchModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    put_bytes(&mut out, model.config().to_kv().to_text().as_bytes());
    put_bytes(&mut out, model.vocabulary().to_text().as_bytes());
    out.extend((model.params().len() as u32).to_le_bytes());
    for (_, name, value) in model.params().iter() {
        put_bytes(&mut out, name.as_bytes());
        out.extend((value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend(v.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Version("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u64()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Version("checkpoint text is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DualBranchModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Version("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let config = ModelConfig::from_kv(&ConfigMap::parse(r.text()?)?)?;
    let vocab = DescriptorVocabulary::from_text(r.text()?)?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Version("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Version(format!("tensor {name}: {e}")))?;
        values.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Version("trailing bytes after checkpoint".into()));
    }
    DualBranchModel::from_parts(config, vocab, values)
}

pub fn save(model: &DualBranchModel, path: &Path) -> Result<()> {
    crate::fsio::write_atomic(path, to_bytes(model))
}

pub fn load(path: &Path) -> Result<DualBranchModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DualBranchModel {
        let cfg = ModelConfig {
            init_seed: 4,
            ..ModelConfig::toy()
        };
        DualBranchModel::new(cfg, DescriptorVocabulary::default_classes()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_version_errors() {
        let bytes = to_bytes(&model());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Version(_))));
        assert!(matches!(from_bytes(b"NOTACKPT"), Err(Error::Version(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Version(_))));
    }
}
