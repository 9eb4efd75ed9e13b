//! Checkpoint container: a keyed map from canonical parameter names to
//! little-endian float arrays, fronted by a JSON shape manifest.
//!
//! Layout: 8-byte magic, u64 little-endian manifest length, the JSON
//! manifest, then the raw blob. The manifest records dtype, per-tensor
//! shapes/offsets in order, and an arbitrary JSON `meta` object.

use super::params::ParamStore;
use crate::scalar::{Dtype, Scalar};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DTCK0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt manifest: {0}")]
    BadManifest(String),
    #[error("blob truncated: tensor {name} needs {need} bytes, {have} available")]
    Truncated { name: String, need: usize, have: usize },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.element_count() * T::DTYPE.size());
    let mut offset = 0usize;
    for (name, value) in store.iter() {
        let len = value.len();
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        for v in value.iter() {
            v.write_le_bytes(&mut blob);
        }
        offset += len * T::DTYPE.size();
    }
    let manifest = Manifest { dtype: T::DTYPE, tensors, meta: meta.clone() };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&manifest_json).map_err(|e| io_err(path, e))?;
    file.write_all(&blob).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load a checkpoint into precision `T`, converting element type if the
/// file was written at the other precision. Same-precision round trips
/// are bit-exact.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ParamStore<T>, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(CheckpointError::BadManifest("manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    let blob = &bytes[16 + mlen..];
    let esize = manifest.dtype.size();

    let mut store = ParamStore::<T>::new();
    for t in &manifest.tensors {
        let need = t.len * esize;
        if t.offset + need > blob.len() {
            return Err(CheckpointError::Truncated {
                name: t.name.clone(),
                need,
                have: blob.len().saturating_sub(t.offset),
            });
        }
        let raw = &blob[t.offset..t.offset + need];
        let mut data = Vec::with_capacity(t.len);
        match manifest.dtype {
            Dtype::F32 => {
                for chunk in raw.chunks_exact(4) {
                    data.push(crate::scalar::real::<T>(f32::from_le_bytes(
                        chunk.try_into().unwrap(),
                    ) as f64));
                }
            }
            Dtype::F64 => {
                for chunk in raw.chunks_exact(8) {
                    data.push(crate::scalar::real::<T>(f64::from_le_bytes(
                        chunk.try_into().unwrap(),
                    )));
                }
            }
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data)
            .map_err(|e| CheckpointError::BadManifest(format!("tensor {}: {e}", t.name)))?;
        store.insert(&t.name, arr);
    }
    Ok((store, manifest.meta))
}
