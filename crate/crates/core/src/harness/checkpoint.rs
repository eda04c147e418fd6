//! Versioned little-endian checkpoint format.
//!
//! ```text
//! "MRGL" | u32 version
//! u64 x 7 model config (n_layers, n_heads, d_model, d_mlp, vocab_size, context_length, seed)
//! u32 len + utf8 phase | u64 step
//! u32 tensor count, then per tensor: u32 len + utf8 name | u32 ndim | u64 dims.. | u64 offset
//! f64 payloads (offsets are bytes from the start of this section)
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::report::write_atomic;
use crate::model::{hex, ModelConfig, TransformerModel};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MRGL";
pub const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Training phase that produced the weights, e.g. `pretrain` or `finetune/math`.
    pub phase: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel, phase: &str, step: u64) -> Self {
        Self {
            config: model.config,
            phase: phase.to_string(),
            step,
            tensors: model.to_named_tensors(),
        }
    }

    pub fn to_model(&self) -> Result<TransformerModel> {
        TransformerModel::from_named_tensors(self.config, &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.n_layers as u64,
            c.n_heads as u64,
            c.d_model as u64,
            c.d_mlp as u64,
            c.vocab_size as u64,
            c.context_length as u64,
            c.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_str(&mut out, &self.phase);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + HASH_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let mut dims = [0u64; 7];
        for d in dims.iter_mut() {
            *d = r.u64()?;
        }
        let config = ModelConfig {
            n_layers: dims[0] as usize,
            n_heads: dims[1] as usize,
            d_model: dims[2] as usize,
            d_mlp: dims[3] as usize,
            vocab_size: dims[4] as usize,
            context_length: dims[5] as usize,
            seed: dims[6],
        };
        let phase = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Integrity(format!("{name}: implausible rank {ndim}")));
            }
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            entries.push((name, shape, offset));
        }
        let payload = &body[r.pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n.checked_mul(8).ok_or_else(|| overflow(&name))?)
                .ok_or_else(|| overflow(&name))?;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| Error::Integrity(format!("{name}: payload out of bounds")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let ck = Self {
            config,
            phase,
            step,
            tensors,
        };
        ck.config.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(ck)
    }

    /// SHA-256 of the serialized form.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn overflow(name: &str) -> Error {
    Error::Integrity(format!("{name}: tensor size overflows"))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Integrity("checkpoint header truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("checkpoint string is not utf-8".into()))
    }
}
