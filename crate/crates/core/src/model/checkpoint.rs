//! Checkpoint serialization: a JSON manifest (config plus named parameter
//! shapes) behind a u64 LE length prefix, followed by one tensor blob per
//! parameter in layout order. Values narrow to f32 with the tensor format.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor_from, write_tensor_to};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "han-checkpoint-v1";

/// Refuse to allocate for obviously corrupt length prefixes.
const MAX_MANIFEST_BYTES: u64 = 1 << 24;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config().clone(),
        params: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Validation(format!("checkpoint manifest encode: {e}")))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&json).map_err(io_err)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        write_tensor_to(&mut w, t, name)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf).map_err(io_err)?;
    let len = u64::from_le_bytes(len_buf);
    if len == 0 || len > MAX_MANIFEST_BYTES {
        return Err(Error::Validation(format!(
            "checkpoint {} manifest length {len} out of range",
            path.display()
        )));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(io_err)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| {
        Error::Validation(format!("checkpoint {} manifest: {e}", path.display()))
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!(
            "checkpoint {} has format {:?}, expected {CHECKPOINT_FORMAT:?}",
            path.display(),
            manifest.format
        )));
    }

    let mut names = Vec::with_capacity(manifest.params.len());
    let mut tensors: Vec<Tensor> = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let t = read_tensor_from(&mut r, &entry.name)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::dim(
                format!("checkpoint blob {}", entry.name),
                format!("{:?}", entry.shape),
                format!("{:?}", t.shape()),
            ));
        }
        names.push(entry.name.clone());
        tensors.push(t);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Validation(format!(
                "checkpoint {} has trailing bytes after the last parameter",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    ParamSet::from_parts(manifest.config, names, tensors)
}
