//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MLKDCKPT"
//! version      u32
//! config_len   u64, followed by that many bytes of ModelConfig JSON
//! n_params     u32
//! n_params times:
//!   name_len   u32, followed by the UTF-8 name
//!   ndim       u32, followed by ndim u64 extents
//!   data       product(extents) f64 values
//! checksum     32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MLKDCKPT";
const CHECKSUM_LEN: usize = 32;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and rejects it unless its stored config equals `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "stored config does not match the requested one: stored {:?}, requested {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

pub(crate) fn encode(model: &Model) -> Result<Vec<u8>> {
    let config =
        serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + config.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.names().len() as u32).to_le_bytes());
    for (name, v) in model.names().iter().zip(model.values()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
        for &d in v.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    let corrupt = |what: &str| Error::Checkpoint(format!("corrupt or truncated file: {what}"));
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut r = Reader {
        bytes: &bytes[..bytes.len() - CHECKSUM_LEN],
        pos: MAGIC.len(),
    };
    let version = r.u32().ok_or_else(|| corrupt("header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    if Sha256::digest(r.bytes).as_slice() != &bytes[bytes.len() - CHECKSUM_LEN..] {
        return Err(corrupt("checksum mismatch"));
    }
    let config_len = r.u64().ok_or_else(|| corrupt("config length"))? as usize;
    let config_json = r.take(config_len).ok_or_else(|| corrupt("config"))?;
    let config: ModelConfig = serde_json::from_slice(config_json)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate()?;

    let layout = config.layout();
    let n = r.u32().ok_or_else(|| corrupt("parameter count"))? as usize;
    if n != layout.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {n} parameters, its config implies {}",
            layout.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for (expected_name, expected_shape) in &layout {
        let len = r.u32().ok_or_else(|| corrupt("name length"))? as usize;
        let name = r.take(len).ok_or_else(|| corrupt("name"))?;
        if name != expected_name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected parameter {expected_name}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let ndim = r.u32().ok_or_else(|| corrupt("rank"))? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("shape"))?;
        if &shape != expected_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {expected_name} has shape {shape:?}, config implies {expected_shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8).ok_or_else(|| corrupt("parameter data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.pos != r.bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Model::from_values(config, values)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
