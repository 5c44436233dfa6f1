//! Checkpoint layout: `manifest.json` plus one little-endian `f32` blob per
//! parameter array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn blob_name(index: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
    format!("{index:03}_{clean}.f32")
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    store: &ParamStore,
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (i, id) in store.ids().enumerate() {
        let value = store.value(id);
        let file = blob_name(i, store.name(id));
        let mut bytes = Vec::with_capacity(value.len() * 4);
        for x in value.data() {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        write_atomic(&dir.join(&file), &bytes)?;
        params.push(ParamEntry { name: store.name(id).to_string(), shape: [value.rows(), value.cols()], file });
    }
    let manifest = CheckpointManifest { kind: kind.to_string(), seed, hyperparameters, params };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Fills every array of `store` from the checkpoint, matching by name and shape.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
        let expected = store.value(id).shape();
        if expected != (entry.shape[0], entry.shape[1]) {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.shape[0] * entry.shape[1] * 4 {
            return Err(Error::Checkpoint(format!("blob {} has {} bytes", entry.file, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        *store.value_mut(id) = Matrix::from_vec(entry.shape[0], entry.shape[1], data);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_store_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("layer.weight", Matrix::from_vec(2, 2, vec![0.1, -0.2, 1.0 / 3.0, 7.5]));
        store.add("layer.bias", Matrix::from_vec(1, 2, vec![0.0, -1e-3]));
        store.freeze();
        save_checkpoint(dir.path(), "test", &store, serde_json::json!({"width": 2}), 42).unwrap();

        let mut fresh = ParamStore::new();
        fresh.add("layer.weight", Matrix::zeros(2, 2));
        fresh.add("layer.bias", Matrix::zeros(1, 2));
        let manifest = load_into(dir.path(), &mut fresh).unwrap();
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.hyperparameters["width"], 2);
        for id in store.ids() {
            assert_eq!(store.value(id), fresh.value(id));
        }
        let blob = std::fs::read(dir.path().join(&manifest.params[0].file)).unwrap();
        assert_eq!(&blob[..4], &0.1f32.to_le_bytes());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("w", Matrix::zeros(2, 3));
        save_checkpoint(dir.path(), "test", &store, serde_json::Value::Null, 0).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Matrix::zeros(3, 2));
        assert!(matches!(load_into(dir.path(), &mut other), Err(Error::Checkpoint(_))));
    }
}
