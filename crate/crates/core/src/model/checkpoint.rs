//! Checkpoint container.
//!
//! Layout: 8-byte magic `PHCKPT\r\n`, `u32` LE format version, `u64` LE header
//! length, a compact JSON header (config, standardization, tensor index),
//! then every tensor as little-endian `f64` in header order. Identical
//! weights always produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Standardization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PHCKPT\r\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    standardization: Standardization,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<S: Scalar, W: Write>(model: &Model<S>, mut w: W) -> Result<()> {
    let params = model.named_params();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        standardization: model.standardization.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, t) in &params {
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
            if buf.len() >= 1 << 16 {
                w.write_all(&buf).map_err(io)?;
                buf.clear();
            }
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Model<S>> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut model = Model::<S>::new(header.config)?;
    model.standardization = header.standardization;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match config ({})",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || shape != &entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut bytes = [0u8; 8];
    for t in model.params_mut() {
        for v in t.data_mut() {
            r.read_exact(&mut bytes).map_err(io)?;
            *v = S::from_f64_lossy(f64::from_le_bytes(bytes));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(model)
}

/// Writes atomically: a sibling temp file is renamed into place.
pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint(model, &mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
