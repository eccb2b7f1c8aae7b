//! Invocation traces, model catalogs and the strategy comparison harness.

mod azure;
mod experiment;
mod trace;

use std::path::PathBuf;

pub use azure::convert_azure_invocations;
pub use experiment::{
    run_experiment, CatalogEntry, CellLog, CellReport, ComparisonReport, DriverMode, ExperimentPlan, ModelCatalog,
    RequestRow, MODEL_FILE,
};
pub use trace::{
    coefficient_of_variation, minute_histogram, parse_trace, parse_trace_str, synthesize_trace, write_trace,
    TraceRecord,
};

use crate::catalog::CatalogError;
use crate::metrics::MetricsError;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("line {line}: unknown model `{model_id}`")]
    UnknownModel { line: usize, model_id: String },
    #[error("line {line}: invalid offset `{value}`")]
    InvalidOffset { line: usize, value: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),
}

impl WorkloadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
