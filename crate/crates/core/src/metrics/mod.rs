//! Stage-interval recording and the analyses built on it: merged-interval
//! utilization, working/waiting breakdown, memory accounting and Gantt export.

mod events;
mod gantt;
mod interval;
mod memory;
mod utilization;
mod verify;

use std::path::PathBuf;

pub use events::{AllocSegment, EventLog, Record, Recorder, RunHeader, Stage, StageInterval};
pub use gantt::{export_gantt, parse_csv, parse_json, render_svg, to_csv, to_json, GanttFormat};
pub use interval::{merge_intervals, union_length, Span};
pub use memory::{MemBucket, MemoryAccountant, MemoryDelta, MemorySample, MemoryTrace};
pub use utilization::{utilization, utilization_by_request, UtilizationReport};
pub use verify::{check_event_log, Violation};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("interval ends before it starts: [{start}, {end}]")]
    InvalidInterval { start: String, end: String },
    #[error("no events recorded")]
    EmptyRun,
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
    #[error("{0}")]
    Format(String),
}
