//! CRC-guarded binary checkpoints.
//!
//! Layout: `u64` LE manifest length, manifest JSON, blob of little-endian
//! `f64` arrays, `u32` LE CRC32 of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
}

fn entries(prefix: &str, store: &ParamStore, blob: &mut Vec<u8>, out: &mut Vec<ParamEntry>) {
    for (name, t) in store.iter() {
        out.push(ParamEntry {
            name: format!("{prefix}.{name}"),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            dtype: DTYPE.into(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(state: &ModelState, cfg: &RunConfig) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(8 * (state.theta.numel() + state.phi.numel()));
    let mut params = Vec::new();
    entries("theta", &state.theta, &mut blob, &mut params);
    entries("phi", &state.phi, &mut blob, &mut params);
    let manifest = serde_json::to_vec(&CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(8 + manifest.len() + blob.len() + 4);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
    Ok(out)
}

pub fn save(state: &ModelState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, cfg)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads only the manifest, after verifying framing and CRC.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if bytes.len() < 12 {
        return Err(bad("file too short"));
    }
    let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let mlen = usize::try_from(mlen).map_err(|_| bad("manifest length overflows"))?;
    if mlen > bytes.len() - 12 {
        return Err(bad("manifest length exceeds file size"));
    }
    let blob = &bytes[8 + mlen..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(blob);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[8..8 + mlen]).map_err(|e| bad(&format!("manifest: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("manifest lacks format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version(version.min(u32::MAX as u64) as u32));
    }
    let manifest: CheckpointManifest =
        serde_json::from_value(value).map_err(|e| bad(&format!("manifest: {e}")))?;
    Ok((manifest, blob))
}

fn restore(prefix: &str, store: &mut ParamStore, manifest: &CheckpointManifest, blob: &[u8], path: &Path) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let full = format!("{prefix}.{}", store.name(id));
        let entry = manifest
            .params
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::MissingParam(full.clone()))?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail: format!("`{full}`: {detail}"),
        };
        if entry.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype `{}`", entry.dtype)));
        }
        if entry.shape != store.get(id).shape() {
            return Err(bad(format!("shape {:?}, model expects {:?}", entry.shape, store.get(id).shape())));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(8 * n).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(bad("data lies outside the blob".into()));
        };
        let data = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(())
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelState, RunConfig)> {
    let (manifest, blob) = read_manifest(bytes, path)?;
    let cfg = manifest.config.clone();
    let mut state = ModelState::init(&cfg)?;
    let expected = state.theta.len() + state.phi.len();
    if manifest.params.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} parameters listed, model has {expected}", manifest.params.len()),
        });
    }
    restore("theta", &mut state.theta, &manifest, blob, path)?;
    restore("phi", &mut state.phi, &manifest, blob, path)?;
    Ok((state, cfg))
}

pub fn load(path: &Path) -> Result<(ModelState, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
