use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CatalogError, ModelDescriptor, WeightShard};
use crate::rng::SplitMix64;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One weight file. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub layer_index: u32,
    pub element_count: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn file_path(&self, layer_index: u32) -> Option<PathBuf> {
        self.entry(layer_index).map(|e| self.dir.join(&e.path))
    }

    pub fn entry(&self, layer_index: u32) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.layer_index == layer_index)
    }
}

/// Values of one layer's weight payload: SplitMix64 seeded per layer, each
/// value the top 24 bits of a draw mapped onto [-1, 1).
pub fn layer_values(seed: u64, layer_index: u32, count: u64) -> Vec<f32> {
    let mut rng = SplitMix64::for_layer(seed, layer_index);
    (0..count).map(|_| rng.next_signed_f32()).collect()
}

/// Writes one shard per layer plus `manifest.json` into `dir`.
pub fn write_weight_files(model: &ModelDescriptor, seed: u64, dir: &Path) -> Result<Manifest, CatalogError> {
    fs::create_dir_all(dir).map_err(|e| CatalogError::io(dir, e))?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let values = layer_values(seed, layer.layer_index, layer.param_count);
        let shard = WeightShard::from_values(layer.layer_index, &values);
        let name = PathBuf::from(format!("layer_{:04}.cica", layer.layer_index));
        let path = dir.join(&name);
        fs::write(&path, shard.to_bytes()).map_err(|e| CatalogError::io(&path, e))?;
        entries.push(ManifestEntry {
            path: name,
            layer_index: layer.layer_index,
            element_count: shard.element_count,
            crc32: shard.checksum,
        });
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&entries)
        .map_err(|source| CatalogError::Json { path: manifest_path.clone(), source })?;
    fs::write(&manifest_path, text).map_err(|e| CatalogError::io(&manifest_path, e))?;
    Ok(Manifest { dir: dir.to_path_buf(), entries })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CatalogError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CatalogError::io(&path, e))?;
    let entries = serde_json::from_str(&text).map_err(|source| CatalogError::Json { path, source })?;
    Ok(Manifest { dir: dir.to_path_buf(), entries })
}
