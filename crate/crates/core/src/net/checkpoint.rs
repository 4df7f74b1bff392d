//! Binary checkpoint container.
//!
//! ```text
//! "SWRM" | version u32 | digest [32] | count u32 |
//!   count x (name_len u32 | name utf-8 | rank u32 | dims u32 x rank | f32 x prod(dims))
//! ```
//! All integers and floats are little-endian.

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"SWRM";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME: usize = 1024;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at offset {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("duplicate tensor {0:?}")]
    Duplicate(String),
    #[error("architecture digest mismatch: expected {expected}, checkpoint has {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint lacks tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.digest);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < len {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn malformed(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    cur.take(4)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(cur.take(32)?);
    let count = cur.u32()? as usize;
    // every entry needs at least 8 header bytes
    if count > cur.remaining() / 8 {
        return Err(cur.malformed(format!("tensor count {count} exceeds payload")));
    }
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        if name_len > MAX_NAME {
            return Err(cur.malformed(format!("name length {name_len}")));
        }
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.malformed("tensor name is not utf-8"))?
            .to_string();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(cur.malformed(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= cur.remaining() / 4)
            .ok_or(CheckpointError::Truncated {
                offset: bytes.len(),
            })?;
        let raw = cur.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| cur.malformed(e.to_string()))?;
        tensors.push((name, tensor));
    }
    if cur.remaining() != 0 {
        return Err(cur.malformed(format!("{} trailing bytes", cur.remaining())));
    }
    Ok(Checkpoint { digest, tensors })
}
