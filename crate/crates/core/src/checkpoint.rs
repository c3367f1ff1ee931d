//! Checkpoint files: a JSON manifest followed by raw little-endian f32
//! tensor blobs.
//!
//! Layout: `[u64 LE: manifest byte length][manifest JSON][blob region]`.
//! The manifest carries a schema version, a kind tag ("denoiser",
//! "adapter", "scene", ...), free-form metadata (model hyperparameters,
//! schedule parameters), and one record per tensor with its offset into the
//! blob region. Tensors are always stored as f32; an f64 model is narrowed
//! on save and re-widened by the caller after load.

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::store::ParamStore;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob region (which starts right after the
    /// manifest).
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Writes `store` to `path` with the given kind tag and metadata.
pub fn save_store<S: Scalar>(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    store: &ParamStore<S>,
) -> Result<()> {
    let mut records = Vec::with_capacity(store.len());
    let mut blobs: Vec<u8> = Vec::new();
    for (name, entry) in store.iter() {
        let offset = blobs.len() as u64;
        for v in entry.value.data() {
            blobs.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_len: blobs.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: kind.into(),
        meta,
        tensors: records,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let mut out = Vec::with_capacity(8 + manifest_json.len() + blobs.len());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blobs);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back. Tensors come back as f32 regardless of the
/// precision they were trained in.
pub fn load_store(path: &Path) -> Result<(Manifest, ParamStore<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(format!(
            "{}: too short for a header",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let blob_start = 8 + manifest_len;
    if bytes.len() < blob_start {
        return Err(Error::Checkpoint(format!(
            "{}: manifest length {manifest_len} exceeds file size",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| Error::Checkpoint(format!("{}: manifest parse: {e}", path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: schema version {} (reader supports {SCHEMA_VERSION})",
            path.display(),
            manifest.schema_version
        )));
    }
    let blobs = &bytes[blob_start..];
    let mut store = ParamStore::<f32>::new();
    for rec in &manifest.tensors {
        if rec.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': unsupported dtype '{}'",
                rec.name, rec.dtype
            )));
        }
        let expected = rec.shape.iter().product::<usize>() * 4;
        if rec.byte_len as usize != expected {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': byte_len {} vs shape {:?}",
                rec.name, rec.byte_len, rec.shape
            )));
        }
        let start = rec.offset as usize;
        let end = start + rec.byte_len as usize;
        if end > blobs.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': blob range {start}..{end} exceeds region of {}",
                rec.name,
                blobs.len()
            )));
        }
        let data: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(rec.name.clone(), Tensor::new(rec.shape.clone(), data))?;
    }
    Ok((manifest, store))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DenoiserMeta {
    config: DenoiserConfig,
    schedule: ScheduleParams,
}

pub fn save_denoiser<S: Scalar>(
    path: &Path,
    model: &DenoiserModel<S>,
    schedule: ScheduleParams,
) -> Result<()> {
    let meta = serde_json::to_value(DenoiserMeta {
        config: *model.config(),
        schedule,
    })
    .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    save_store(path, "denoiser", meta, &model.params)
}

/// Loads a denoiser checkpoint; returns the model and the schedule
/// parameters it was trained under.
pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel<f32>, ScheduleParams)> {
    let (manifest, store) = load_store(path)?;
    if manifest.kind != "denoiser" {
        return Err(Error::Checkpoint(format!(
            "{}: kind '{}' is not a denoiser checkpoint",
            path.display(),
            manifest.kind
        )));
    }
    let meta: DenoiserMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| Error::Checkpoint(format!("denoiser meta: {e}")))?;
    let model = DenoiserModel::from_parts(meta.config, store)?;
    Ok((model, meta.schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};

    #[test]
    fn store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::rng(1, stream::EVAL);
        store.insert("a.weight", rng::randn(vec![3, 4], &mut r)).unwrap();
        store.insert("b.bias", rng::randn(vec![7], &mut r)).unwrap();
        save_store(&path, "scene", serde_json::json!({"note": 1}), &store).unwrap();

        let (manifest, loaded) = load_store(&path).unwrap();
        assert_eq!(manifest.kind, "scene");
        assert_eq!(manifest.tensors.len(), 2);
        assert_eq!(loaded.value("a.weight").unwrap().data(), store.value("a.weight").unwrap().data());
        assert_eq!(loaded.value("b.bias").unwrap().shape(), &[7]);
    }

    #[test]
    fn f64_store_narrows_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.ckpt");
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::new(vec![2], vec![0.1f64, 1.0 / 3.0]))
            .unwrap();
        save_store(&path, "scene", serde_json::Value::Null, &store).unwrap();
        let (_, loaded) = load_store(&path).unwrap();
        assert_eq!(loaded.value("w").unwrap().data(), &[0.1f32, 1.0f32 / 3.0]);
    }

    #[test]
    fn denoiser_round_trips_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = DenoiserConfig {
            side: 4,
            num_classes: 2,
            hidden_width: 16,
            hidden_layers: 2,
            time_embed_dim: 8,
            class_embed_dim: 4,
        };
        let model = DenoiserModel::<f32>::init(config, 3).unwrap();
        save_denoiser(&path, &model, ScheduleParams::default()).unwrap();
        let (loaded, sched) = load_denoiser(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(sched, ScheduleParams::default());
        assert_eq!(loaded.params.fingerprint(), model.params.fingerprint());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();

        let short = dir.path().join("short.ckpt");
        fs::write(&short, [1, 2, 3]).unwrap();
        assert!(load_store(&short).is_err());

        let lying_header = dir.path().join("lying.ckpt");
        let mut bytes = (1_000_000u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        fs::write(&lying_header, bytes).unwrap();
        assert!(load_store(&lying_header).is_err());

        // Valid manifest but truncated blob region.
        let truncated = dir.path().join("trunc.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::new(vec![4], vec![1.0; 4])).unwrap();
        save_store(&truncated, "scene", serde_json::Value::Null, &store).unwrap();
        let full = fs::read(&truncated).unwrap();
        fs::write(&truncated, &full[..full.len() - 4]).unwrap();
        let err = load_store(&truncated).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn future_schema_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let manifest = serde_json::json!({
            "schema_version": 99,
            "kind": "scene",
            "meta": null,
            "tensors": [],
        });
        let mj = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = (mj.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(&mj);
        fs::write(&path, bytes).unwrap();
        let err = load_store(&path).unwrap_err();
        assert!(err.to_string().contains("schema version 99"), "{err}");
    }
}
