//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `JSTCKPT\0`, `u32` version, `u64` header length, header JSON
//! (`config`, `config_hash`, `vocab`), `u64` block count, then per block a
//! `u32`-prefixed UTF-8 name, `u32` rank, `u64` extents and `f64` values,
//! and finally the SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"JSTCKPT\0";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    vocab: Vocabulary,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            vocab: self.vocab.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint. With `expected`, the stored configuration must
    /// hash identically.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let header_len = r.len()?;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let config = header.config.validated()?;
        if config.hash() != header.config_hash {
            return Err(corrupt("stored config does not match its hash"));
        }
        if let Some(want) = expected {
            let want = want.clone().validated()?;
            if want.hash() != header.config_hash {
                return Err(corrupt(format!(
                    "config-hash mismatch: checkpoint holds a {} model, expected {}",
                    config.variant, want.variant
                )));
            }
        }

        let count = r.len()?;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| corrupt(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("block too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            blocks.push((name, Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after parameter blocks"));
        }

        let mut model = Model::new(config, header.vocab, None, 0)?;
        if blocks.len() != model.params.len() {
            return Err(corrupt(format!(
                "{} parameter blocks, model has {}",
                blocks.len(),
                model.params.len()
            )));
        }
        let mut seen = vec![false; model.params.len()];
        for (name, t) in blocks {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
            if seen[id.0] {
                return Err(corrupt(format!("parameter {name} stored twice")));
            }
            seen[id.0] = true;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(corrupt(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt("length does not fit in memory"))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint; nothing is built unless the whole file
/// parses.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes, expected)
}
