//! Asynchronous weight retrieval: a priority-ordered task table shared by a
//! threaded engine (real file reads, throttled to a bandwidth model) and a
//! virtual-clock engine for deterministic simulation.

mod engine;
mod sim;
mod table;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use engine::{EngineConfig, RetrievalEngine};
pub use sim::SimRetrievalEngine;
pub use table::{RetrievalTask, TaskTable, Transition};

use crate::catalog::{CatalogError, WeightShard};
use crate::metrics::MemoryAccountant;
use crate::rng::SplitMix64;

/// Default read granularity; suspension takes effect between chunks.
pub const DEFAULT_CHUNK_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Queued,
    Running,
    Suspended,
    Done,
    Failed,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed)
    }

    /// Queued→Running, Running↔Suspended, Running→Done|Failed.
    pub fn can_become(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Running, Suspended) | (Suspended, Running) | (Running, Done) | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Priority {
    Normal,
    High,
}

/// A completed, checksum-verified layer shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadySignal {
    pub request_id: u64,
    pub layer_index: u32,
    pub task_id: TaskId,
    pub shard: WeightShard,
    pub started_at: u64,
    pub completed_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("weight file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("reading {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("layer {layer}: {source}")]
    Corrupt {
        layer: u32,
        #[source]
        source: CatalogError,
    },
    #[error("shard in {} carries layer {found}, expected {expected}", path.display())]
    WrongLayer { path: PathBuf, expected: u32, found: u32 },
}

/// Outcome delivered to the owning request, in completion order.
#[derive(Debug)]
pub struct Completion {
    pub request_id: u64,
    pub layer_index: u32,
    pub task_id: TaskId,
    pub result: Result<ReadySignal, RetrievalError>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("retrieval engine has shut down")]
    EngineStopped,
    #[error("no such retrieval task {0}")]
    NoSuchTask(TaskId),
}

/// Engine-side events the scheduler listens to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineNotice {
    Started { task: TaskId, request_id: u64, layer_index: u32, ts: u64 },
    Finished { task: TaskId, request_id: u64, layer_index: u32, ts: u64, ok: bool },
}

/// Artificial extra read time per layer, in model µs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiskDelay {
    #[default]
    None,
    /// Uniform in `[0, max_us]`, drawn per layer from the seed.
    Seeded {
        seed: u64,
        max_us: u64,
    },
    PerLayer(BTreeMap<u32, u64>),
}

impl DiskDelay {
    pub fn extra_for(&self, layer_index: u32) -> u64 {
        match self {
            DiskDelay::None => 0,
            DiskDelay::Seeded { seed, max_us } => {
                SplitMix64::for_layer(seed ^ 0xD15C_D1A7, layer_index).below(max_us + 1)
            }
            DiskDelay::PerLayer(map) => map.get(&layer_index).copied().unwrap_or(0),
        }
    }
}

/// Checks a fully read file and turns it into the request's completion.
pub(crate) fn finish_read(
    task: &RetrievalTask,
    bytes: &[u8],
    started_at: u64,
    completed_at: u64,
) -> Result<ReadySignal, RetrievalError> {
    let shard = crate::catalog::parse_weight_shard(bytes)
        .map_err(|source| RetrievalError::Corrupt { layer: task.layer_index, source })?;
    if shard.layer_index != task.layer_index {
        return Err(RetrievalError::WrongLayer {
            path: task.path.clone(),
            expected: task.layer_index,
            found: shard.layer_index,
        });
    }
    Ok(ReadySignal {
        request_id: task.request_id,
        layer_index: task.layer_index,
        task_id: task.task_id,
        shard,
        started_at,
        completed_at,
    })
}

/// Drops the layer's block and shard buffer from `accountant`; idempotent.
pub fn release_layer_buffers(accountant: &MemoryAccountant, ts: u64, request_id: u64, layer_index: u32) -> u64 {
    accountant.release_layer(ts, request_id, layer_index)
}
