use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};

use serde::{Deserialize, Serialize};

use super::Span;

/// Pipeline stage: construction, retrieval, apply, execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    L,
    R,
    A,
    E,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::L, Stage::R, Stage::A, Stage::E];

    pub fn row(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::L => "L",
            Stage::R => "R",
            Stage::A => "A",
            Stage::E => "E",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" => Ok(Stage::L),
            "R" => Ok(Stage::R),
            "A" => Ok(Stage::A),
            "E" => Ok(Stage::E),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// One recorded stage execution, µs from the run epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageInterval {
    pub request_id: u64,
    pub stage: Stage,
    #[serde(rename = "layer")]
    pub layer_index: u32,
    #[serde(rename = "start_us")]
    pub start: u64,
    #[serde(rename = "end_us")]
    pub end: u64,
}

impl StageInterval {
    pub fn span(&self) -> Span<u64> {
        Span::new(self.start, self.end)
    }

    pub fn duration(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }
}

/// Full-precision placeholder materialization that follows an L interval on
/// the construction worker. Drawn hatched; not part of the L interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocSegment {
    pub request_id: u64,
    #[serde(rename = "layer")]
    pub layer_index: u32,
    #[serde(rename = "start_us")]
    pub start: u64,
    #[serde(rename = "end_us")]
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub strategy: String,
    pub model_id: String,
    pub seed: u64,
    pub time_scale: f64,
    /// Unix seconds at the run epoch; absent for virtual-clock runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub header: RunHeader,
    pub events: Vec<StageInterval>,
    #[serde(default)]
    pub alloc_segments: Vec<AllocSegment>,
}

impl EventLog {
    pub fn new(header: RunHeader) -> Self {
        Self { header, events: Vec::new(), alloc_segments: Vec::new() }
    }

    /// Sorts events by (start, stage, request, layer) so logs from
    /// concurrent producers compare deterministically.
    pub fn sort(&mut self) {
        self.events.sort_by_key(|e| (e.start, e.stage, e.request_id, e.layer_index, e.end));
        self.alloc_segments.sort_by_key(|s| (s.start, s.request_id, s.layer_index, s.end));
    }

    pub fn for_request(&self, request_id: u64) -> impl Iterator<Item = &StageInterval> {
        self.events.iter().filter(move |e| e.request_id == request_id)
    }

    pub fn find(&self, request_id: u64, stage: Stage, layer_index: u32) -> Option<&StageInterval> {
        self.events.iter().find(|e| e.request_id == request_id && e.stage == stage && e.layer_index == layer_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Stage(StageInterval),
    Alloc(AllocSegment),
}

/// Single consumer of records sent from any number of producer threads.
#[derive(Debug)]
pub struct Recorder {
    tx: Sender<Record>,
    rx: Receiver<Record>,
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new()
    }
}

impl Recorder {
    pub fn new() -> Self {
        let (tx, rx) = channel();
        Self { tx, rx }
    }

    pub fn sink(&self) -> Sender<Record> {
        self.tx.clone()
    }

    /// Appends everything received so far to `log`.
    pub fn drain_into(&self, log: &mut EventLog) {
        for record in self.rx.try_iter() {
            match record {
                Record::Stage(e) => log.events.push(e),
                Record::Alloc(s) => log.alloc_segments.push(s),
            }
        }
    }
}
