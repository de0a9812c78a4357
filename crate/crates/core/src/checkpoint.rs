//! Model checkpoints: a JSON manifest next to one binary blob of
//! concatenated TNSR tensors.
//!
//! `model.json` names its blob (`model.bin`) and lists every parameter with
//! its shape, byte offset and byte length. Loading rebuilds the expected
//! layout from the stored config and rejects any entry that disagrees.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::Params;
use crate::tensor::{DType, Scalar};

pub const FORMAT: &str = "litv2-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub dtype: DType,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub entries: Vec<Entry>,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(blob)
}

/// Write `<path>` (manifest) and its sibling blob; returns both paths.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let blob_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("model")
    );
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in params.named() {
        let bytes = io::encode(t);
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        config: cfg.clone(),
        dtype: T::DTYPE,
        blob: blob_name.clone(),
        entries,
    };
    let blob_file = blob_path(path, &blob_name);
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(vec![path.to_path_buf(), blob_file])
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: invalid checkpoint manifest: {e}", path.display())))?;
    if m.format != FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

/// Load a checkpoint, converting stored tensors to `T` if needed.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<T>)> {
    let path = path.as_ref();
    let m = read_manifest(path)?;
    let blob_file = blob_path(path, &m.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let expected = ModelParams::<T>::shapes(&m.config)?;
    if expected.len() != m.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} entries, config needs {}",
            m.entries.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in m.entries.iter().zip(&expected) {
        let fail = |why: String| Error::Format(format!("checkpoint entry {}: {why}", entry.name));
        if &entry.name != name || &entry.shape != shape {
            return Err(fail(format!("expected {name} with shape {shape:?}, found shape {:?}", entry.shape)));
        }
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.length as usize)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| fail(format!("bytes {}+{} exceed blob length {}", entry.offset, entry.length, blob.len())))?;
        let (t, used) = io::decode(&blob[start..end]).map_err(|e| fail(e.to_string()))?;
        if used != end - start {
            return Err(fail(format!("length {} but tensor occupies {used} bytes", entry.length)));
        }
        if t.shape() != shape.as_slice() {
            return Err(fail(format!("stored tensor has shape {:?}", t.shape())));
        }
        tensors.push(t.into_typed::<T>());
    }
    let mut params = ModelParams::<T>::init(&mut crate::RngState::new(0), &m.config)?;
    let mut it = tensors.into_iter();
    params.visit_mut("", &mut |_, t| {
        if let Some(src) = it.next() {
            *t = src;
        }
    });
    Ok((m.config, params))
}
