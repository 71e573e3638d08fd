//! Self-describing checkpoint format.
//!
//! Layout: the 4-byte magic `MDA1`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor's raw little-endian buffer back to back.
//! The manifest stores the model configuration and, per tensor, its name,
//! shape, element type and byte offset into the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamGroup, SegNet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MDA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

pub fn save_checkpoint<T: Scalar>(model: &SegNet<T>, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(model.params().total() * T::BYTES);
    let mut tensors = Vec::with_capacity(model.params().len());
    for e in model.params().entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            group: e.group,
            shape: e.tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: data.len(),
        });
        for &v in e.tensor.data() {
            v.write_le(&mut data);
        }
    }
    let manifest = serde_json::to_vec(&CheckpointManifest {
        config: model.config().clone(),
        tensors,
    })?;
    let io = |e| Error::io(path, e);
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&manifest).map_err(io)?;
    file.write_all(&data).map_err(io)?;
    Ok(())
}

fn split(path: &Path, bytes: &[u8]) -> Result<(CheckpointManifest, usize)> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (missing MDA1 magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| bad(format!("manifest: {e}")))?;
    Ok((manifest, end))
}

/// Reads only the manifest (configuration and tensor table).
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split(path, &bytes).map(|(m, _)| m)
}

/// Loads a checkpoint. Stored values are converted when the checkpoint's
/// element type differs from `T`. When `expected` is given, the stored
/// configuration must equal it.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<SegNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, start) = split(path, &bytes)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if let Some(want) = expected {
        if *want != manifest.config {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model ({}×{}, depth {}, base {}), expected {} ({}×{}, depth {}, base {})",
                path.display(),
                manifest.config.variant,
                manifest.config.height,
                manifest.config.width,
                manifest.config.depth,
                manifest.config.base_channels,
                want.variant,
                want.height,
                want.width,
                want.depth,
                want.base_channels
            )));
        }
    }
    let data = &bytes[start..];
    let mut params = ModelParams::default();
    for rec in &manifest.tensors {
        let numel: usize = rec.shape.iter().product();
        let values: Vec<T> = match rec.dtype.as_str() {
            "f32" => read_values::<f32, T>(data, rec.offset, numel),
            "f64" => read_values::<f64, T>(data, rec.offset, numel),
            other => return Err(bad(format!("tensor '{}' has unknown dtype '{other}'", rec.name))),
        }
        .ok_or_else(|| bad(format!("tensor '{}' runs past the end of the data section", rec.name)))?;
        params.insert(rec.name.clone(), rec.group, Tensor::new(&rec.shape, values)?)?;
    }
    SegNet::from_parts(manifest.config, params)
}

fn read_values<S: Scalar, T: Scalar>(data: &[u8], offset: usize, numel: usize) -> Option<Vec<T>> {
    let end = offset.checked_add(numel.checked_mul(S::BYTES)?)?;
    let slice = data.get(offset..end)?;
    Some(
        slice
            .chunks_exact(S::BYTES)
            .map(|c| T::from_f64_lossy(S::read_le(c).to_f64_lossy()))
            .collect(),
    )
}
