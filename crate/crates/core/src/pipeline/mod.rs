//! Per-request orchestration of the four stages under a loading strategy.
//!
//! Two drivers share the readiness rules in [`tracker`]: a discrete-event
//! simulator on a virtual clock ([`Simulator`]) and a threaded runtime that
//! sleeps scaled stage costs ([`Runtime`]).

mod realtime;
mod sim;
mod tracker;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use realtime::{RequestHandle, Runtime, RuntimeConfig};
pub use sim::{SimConfig, SimOutcome, Simulator};
pub use tracker::{can_apply, DependencyTracker, LayerProgress};

use crate::catalog::{CatalogError, Manifest, ModelDescriptor};
use crate::decoupler::{EngineError, RetrievalError};
use crate::metrics::{AllocSegment, StageInterval};
use crate::miniloader::{LoaderError, RegistrationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    SP,
    Mini,
    Preload,
    Cicada,
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyName::SP => "sp",
            StrategyName::Mini => "mini",
            StrategyName::Preload => "preload",
            StrategyName::Cicada => "cicada",
        })
    }
}

impl FromStr for StrategyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(StrategyName::SP),
            "mini" => Ok(StrategyName::Mini),
            "preload" => Ok(StrategyName::Preload),
            "cicada" => Ok(StrategyName::Cicada),
            other => Err(format!("unknown strategy `{other}` (expected sp, mini, preload or cicada)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub name: StrategyName,
    pub enable_miniloader: bool,
    pub enable_decoupler: bool,
    pub enable_priority_scheduler: bool,
}

impl StrategyConfig {
    pub const SP: Self = Self::new(StrategyName::SP, false, false, false);
    pub const MINI: Self = Self::new(StrategyName::Mini, true, false, false);
    pub const PRELOAD: Self = Self::new(StrategyName::Preload, false, true, true);
    pub const CICADA: Self = Self::new(StrategyName::Cicada, true, true, true);
    pub const ALL: [Self; 4] = [Self::SP, Self::MINI, Self::PRELOAD, Self::CICADA];

    const fn new(name: StrategyName, mini: bool, decoupler: bool, scheduler: bool) -> Self {
        Self { name, enable_miniloader: mini, enable_decoupler: decoupler, enable_priority_scheduler: scheduler }
    }

    pub fn of(name: StrategyName) -> Self {
        match name {
            StrategyName::SP => Self::SP,
            StrategyName::Mini => Self::MINI,
            StrategyName::Preload => Self::PRELOAD,
            StrategyName::Cicada => Self::CICADA,
        }
    }

    pub fn registration_mode(&self) -> RegistrationMode {
        if self.enable_miniloader {
            RegistrationMode::MiniCompressed
        } else {
            RegistrationMode::FullWithInit
        }
    }
}

impl FromStr for StrategyConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(Self::of)
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub request_id: u64,
    pub model: Arc<ModelDescriptor>,
    pub weights: Arc<Manifest>,
    pub input: Vec<f32>,
    /// Receipt time, µs on the run clock.
    pub arrival_ts: u64,
    /// Seed of the pseudo-initializer used by full-precision registration.
    pub init_seed: u64,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        if self.input.len() != self.model.input_len() {
            return Err(PipelineError::InputLength { expected: self.model.input_len(), got: self.input.len() });
        }
        for layer in &self.model.layers {
            let entry =
                self.weights.entry(layer.layer_index).ok_or(PipelineError::MissingWeights(layer.layer_index))?;
            if entry.element_count != layer.param_count {
                return Err(PipelineError::MissingWeights(layer.layer_index));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub request_id: u64,
    pub output: Vec<f32>,
    pub arrival_ts: u64,
    pub admitted_ts: u64,
    /// end of the last stage event minus arrival.
    pub latency: u64,
    /// start(L_0) minus arrival.
    pub layer_wait: u64,
    pub events: Vec<StageInterval>,
    pub alloc_segments: Vec<AllocSegment>,
    /// First four payload bytes of every applied shard, by layer.
    pub fingerprints: Vec<[u8; 4]>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("layer {layer}: retrieval failed: {source}")]
    Retrieval {
        layer: u32,
        #[source]
        source: RetrievalError,
    },
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error("no matching weight file for layer {0}")]
    MissingWeights(u32),
    #[error("input has {got} values, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("dependency invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] CatalogError),
    #[error("runtime stopped before request {0} finished")]
    Stopped(u64),
}
