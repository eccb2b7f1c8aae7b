//! Synthetic model descriptors, cost calibration and the on-disk weight format.

mod files;
mod model;
mod shard;

use std::path::PathBuf;

pub use files::{layer_values, load_manifest, write_weight_files, Manifest, ManifestEntry, MANIFEST_FILE};
pub use model::{generate_model, CostProfile, FamilyDefaults, LayerSpec, ModelDescriptor, ModelFamily};
pub use shard::{parse_weight_shard, DType, WeightShard, SHARD_HEADER_BYTES, SHARD_MAGIC, SHARD_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("model must have at least one layer")]
    DegenerateModel,
    #[error("invalid cost profile: {0}")]
    InvalidProfile(String),
    #[error("invalid model descriptor: {0}")]
    InvalidModel(String),
    #[error("weight shard format error: {0}")]
    Format(String),
    #[error("corrupt shard: crc32 {actual:#010x} does not match header {expected:#010x}")]
    CorruptShard { expected: u32, actual: u32 },
    #[error("truncated shard: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CatalogError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
