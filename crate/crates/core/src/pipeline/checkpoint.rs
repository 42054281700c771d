//! Checkpoints: a JSON manifest describing named tensors stored back to back
//! in a little-endian binary blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::SplitConfig;
use super::dataset::sha256_hex;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, ParamStore};
use crate::training::{Model, NormStats};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub norm: NormStats,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub val_r2: f64,
    pub config_hash: String,
    pub split: SplitConfig,
    pub split_by_mesh: bool,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Metadata written alongside the parameters.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub norm: NormStats,
    pub seed: u64,
    pub epoch: usize,
    pub val_r2: f64,
    pub config_hash: String,
    pub split: SplitConfig,
    pub split_by_mesh: bool,
}

/// Every tensor must start where the previous one ended, match its shape and
/// the blob must end exactly after the last tensor.
pub fn check_tiling(tensors: &[TensorEntry], dtype: Dtype, blob_len: usize) -> Result<()> {
    let mut cursor = 0;
    for t in tensors {
        if t.offset != cursor {
            return Err(Error::Integrity(format!(
                "tensor {} starts at byte {}, expected {cursor}",
                t.name, t.offset
            )));
        }
        if t.nbytes != t.shape[0] * t.shape[1] * dtype.width() {
            return Err(Error::Integrity(format!(
                "tensor {} holds {} bytes for shape {:?}",
                t.name, t.nbytes, t.shape
            )));
        }
        cursor += t.nbytes;
    }
    if cursor != blob_len {
        return Err(Error::Integrity(format!(
            "tensors cover {cursor} bytes of a {blob_len}-byte blob"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta, dtype: Dtype) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let offset = blob.len();
        for &v in &t.data {
            match dtype {
                Dtype::F32 => blob.extend((v as f32).to_le_bytes()),
                Dtype::F64 => blob.extend(v.to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows, t.cols],
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        dtype,
        model: model.cfg.clone(),
        ablation: model.ablation.clone(),
        norm: meta.norm,
        seed: meta.seed,
        epoch: meta.epoch,
        val_r2: meta.val_r2,
        config_hash: meta.config_hash.clone(),
        split: meta.split.clone(),
        split_by_mesh: meta.split_by_mesh,
        tensors,
        blob_sha256: sha256_hex(&blob),
    };
    let blob_path = dir.join(CHECKPOINT_BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
    let path = dir.join(CHECKPOINT_MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Integrity(format!("{}: checksum mismatch", blob_path.display())));
    }
    check_tiling(&manifest.tensors, manifest.dtype, blob.len())?;
    manifest.model.validate()?;
    // Architecture and names come from a fresh initialization; the blob must
    // supply exactly the same tensors.
    let mut model = Model::new(manifest.model.clone(), manifest.ablation.clone(), 0)?;
    if model.params.len() != manifest.tensors.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let mut store = ParamStore::new();
    for (entry, (name, fresh)) in manifest
        .tensors
        .iter()
        .zip(model.params.names().iter().zip(model.params.tensors()))
    {
        if &entry.name != name || entry.shape != [fresh.rows, fresh.cols] {
            return Err(Error::Integrity(format!(
                "tensor {} {:?} does not match model tensor {name} {:?}",
                entry.name,
                entry.shape,
                [fresh.rows, fresh.cols]
            )));
        }
        let bytes = &blob[entry.offset..entry.offset + entry.nbytes];
        let data: Vec<f64> = match manifest.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        store.insert(name, Mat::from_vec(entry.shape[0], entry.shape[1], data));
    }
    model.params = store;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, shape: [usize; 2], offset: usize, nbytes: usize) -> TensorEntry {
        TensorEntry {
            name: name.into(),
            shape,
            offset,
            nbytes,
        }
    }

    #[test]
    fn tiling_rules() {
        let ok = [entry("a", [2, 3], 0, 24), entry("b", [1, 1], 24, 4)];
        check_tiling(&ok, Dtype::F32, 28).unwrap();
        assert!(check_tiling(&ok, Dtype::F32, 32).is_err());
        let gap = [entry("a", [2, 3], 0, 24), entry("b", [1, 1], 28, 4)];
        assert!(check_tiling(&gap, Dtype::F32, 32).is_err());
        let overlap = [entry("a", [2, 3], 0, 24), entry("b", [1, 1], 20, 4)];
        assert!(check_tiling(&overlap, Dtype::F32, 24).is_err());
        let wrong_size = [entry("a", [2, 3], 0, 24)];
        assert!(check_tiling(&wrong_size, Dtype::F64, 24).is_err());
    }
}
