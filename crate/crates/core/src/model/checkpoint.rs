//! Binary checkpoint container.
//!
//! Layout (little endian): magic `RELTRCK\0`, `u32` format version, `u64`
//! header length, JSON header, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, a `u32` rank, `u64` extents and `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::{Adam, AdamConfig};
use super::transformer::Model;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RELTRCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

/// A model plus training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub optimizer: Option<Adam>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn fill_slots(
    target: &mut ModelWeights,
    prefix: &str,
    tensors: &mut std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, slot) in target.slots_mut() {
        let key = format!("{prefix}{name}");
        let t = tensors.remove(&key).ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
        if t.shape() != slot.shape() {
            return Err(corrupt(format!(
                "tensor {key} has shape {:?}, configuration expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            adam: self.optimizer.as_ref().map(|a| AdamHeader { config: a.config, t: a.t }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors = Vec::new();
        for (n, t) in self.model.weights.slots() {
            tensors.push((n, t));
        }
        if let Some(a) = &self.optimizer {
            for (n, t) in a.m.slots() {
                tensors.push((format!("adam.m.{n}"), t));
            }
            for (n, t) in a.v.slots() {
                tensors.push((format!("adam.v.{n}"), t));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (n, t) in tensors {
            write_tensor(&mut out, &n, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let n = c.u64()? as usize;
        let header: Header = serde_json::from_slice(c.take(n)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.config.validate()?;
        let count = c.u32()?;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, t) = c.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if c.pos != buf.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let mut weights = ModelWeights::zeros(&header.config)?;
        fill_slots(&mut weights, "", &mut tensors)?;
        let optimizer = match header.adam {
            Some(h) => {
                let mut adam = Adam::new(h.config, &weights);
                adam.t = h.t;
                fill_slots(&mut adam.m, "adam.m.", &mut tensors)?;
                fill_slots(&mut adam.v, "adam.v.", &mut tensors)?;
                Some(adam)
            }
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(Self { model: Model { config: header.config, weights }, step: header.step, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless `cfg` describes the same architecture as the checkpoint.
    pub fn ensure_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let want = ModelWeights::zeros(cfg)?.slot_shapes();
        if want != self.model.weights.slot_shapes() || cfg.attention != self.model.config.attention {
            return Err(corrupt(format!(
                "checkpoint (format version {FORMAT_VERSION}) does not match the given configuration"
            )));
        }
        Ok(())
    }
}
