//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"LATNCKPT"
//! u32    format version
//! u64    config length, then the model config as JSON
//! u64    tensor count, then per tensor:
//!        u32 name length, UTF-8 name, u32 rank, u64 dims…, f64 values…
//! ```
//!
//! Encoding is a pure function of the model, so equal models give equal bytes.

use std::fs;
use std::path::Path;

use crate::classifier::{ModelConfig, SluModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LATNCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(config: &ModelConfig, model: &SluModel<Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    let named = model.named_parameters();
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

/// Decodes a checkpoint and checks every tensor against the shapes the
/// stored config implies.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, SluModel<Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let json_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)?;
    let mut model = SluModel::init(&config, 0)?;

    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut idx = 0;
    let mut problem = None;
    model.for_each_mut(&mut |name, t| {
        match tensors.get(idx) {
            Some((n, v)) if n == name && v.shape() == t.shape() => *t = v.clone(),
            Some((n, v)) => {
                problem.get_or_insert_with(|| format!("expected {name} {:?}, found {n} {:?}", t.shape(), v.shape()));
            }
            None => {
                problem.get_or_insert_with(|| format!("missing tensor {name}"));
            }
        }
        idx += 1;
    });
    if problem.is_none() && idx != tensors.len() {
        problem = Some(format!("{} unexpected tensors", tensors.len() - idx));
    }
    match problem {
        Some(p) => Err(Error::Checkpoint(p)),
        None => Ok((config, model)),
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, model: &SluModel<Tensor>) -> Result<()> {
    fs::write(path, encode_checkpoint(config, model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, SluModel<Tensor>)> {
    decode_checkpoint(&fs::read(path)?)
}
