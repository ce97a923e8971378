use std::path::Path;

use super::Architecture;
use crate::codec::{ByteReader, ByteWriter};
use crate::engine::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DAWEIGHT";
const VERSION: u32 = 1;

/// All trainable tensors of a model together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

impl ModelWeights {
    /// Layout: magic, version, JSON architecture, tensor count, then per
    /// tensor its rank, dimensions and row-major little-endian `f64` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.text(&serde_json::to_string(&self.arch).expect("architecture serializes"));
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let arch: Architecture =
            serde_json::from_str(r.text()?).map_err(|e| Error::Format(e.to_string()))?;
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
            let data = r.f64s(numel)?;
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        r.finish()?;
        let expected = arch.param_shapes();
        if expected.len() != tensors.len()
            || expected.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::Format("tensor shapes disagree with architecture".into()));
        }
        Ok(ModelWeights { arch, tensors })
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    ModelWeights::from_bytes(&std::fs::read(path)?)
}
