use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{minute_histogram, TraceRecord, WorkloadError};
use crate::catalog::{load_manifest, write_weight_files, Manifest, ModelDescriptor};
use crate::decoupler::{DiskDelay, EngineConfig};
use crate::metrics::{
    render_svg, to_csv, to_json, utilization_by_request, EventLog, MemBucket, MemoryTrace, RunHeader, Stage,
};
use crate::miniloader::DEFAULT_SKIP_FACTOR;
use crate::pipeline::{
    InferenceRequest, InferenceResult, PipelineError, Runtime, RuntimeConfig, SimConfig, Simulator, StrategyConfig,
    StrategyName,
};
use crate::rng::SplitMix64;
use crate::scheduler::SchedulerConfig;

pub const MODEL_FILE: &str = "model.json";
/// Requests drawn in each cell's Gantt chart.
const GANTT_REQUESTS: usize = 8;

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub model: Arc<ModelDescriptor>,
    pub weights: Arc<Manifest>,
}

/// Models by id, each with its weight files.
#[derive(Debug, Clone, Default)]
pub struct ModelCatalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl ModelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: ModelDescriptor, weights: Manifest) {
        self.entries
            .insert(model.model_id.clone(), CatalogEntry { model: Arc::new(model), weights: Arc::new(weights) });
    }

    pub fn get(&self, model_id: &str) -> Option<&CatalogEntry> {
        self.entries.get(model_id)
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.entries.contains_key(model_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `model.json` plus weight files for `model` into `dir` and adds it.
    pub fn add_generated(&mut self, model: ModelDescriptor, weight_seed: u64, dir: &Path) -> Result<(), WorkloadError> {
        let weights = write_weight_files(&model, weight_seed, dir)?;
        model.save_json(&dir.join(MODEL_FILE))?;
        self.insert(model, weights);
        Ok(())
    }

    /// Loads one model directory as written by [`ModelCatalog::add_generated`].
    pub fn load_model_dir(&mut self, dir: &Path) -> Result<String, WorkloadError> {
        let model = ModelDescriptor::load_json(&dir.join(MODEL_FILE))?;
        let weights = load_manifest(dir)?;
        let id = model.model_id.clone();
        self.insert(model, weights);
        Ok(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverMode {
    Virtual,
    Real,
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub trace: Vec<TraceRecord>,
    pub strategies: Vec<StrategyConfig>,
    pub models: ModelCatalog,
    pub seed: u64,
    pub time_scale: f64,
    pub repeat_count: u32,
    pub mode: DriverMode,
    pub max_in_flight: usize,
    pub max_parallel_reads: usize,
    pub disk_delay: DiskDelay,
    pub scheduler: SchedulerConfig,
    pub skip_factor: f64,
}

impl ExperimentPlan {
    pub fn new(trace: Vec<TraceRecord>, models: ModelCatalog, seed: u64) -> Self {
        Self {
            trace,
            strategies: StrategyConfig::ALL.to_vec(),
            models,
            seed,
            time_scale: 1.0 / 16.0,
            repeat_count: 1,
            mode: DriverMode::Virtual,
            max_in_flight: 8,
            max_parallel_reads: 1,
            disk_delay: DiskDelay::None,
            scheduler: SchedulerConfig::default(),
            skip_factor: DEFAULT_SKIP_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.strategies.is_empty() {
            return Err(WorkloadError::InvalidPlan("no strategies".into()));
        }
        if self.repeat_count == 0 {
            return Err(WorkloadError::InvalidPlan("repeat_count must be at least 1".into()));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(WorkloadError::InvalidPlan(format!("time_scale {} must be positive", self.time_scale)));
        }
        if let Some((i, r)) = self.trace.iter().enumerate().find(|(_, r)| !self.models.contains(&r.model_id)) {
            return Err(WorkloadError::UnknownModel { line: i + 1, model_id: r.model_id.clone() });
        }
        Ok(())
    }

    /// The request for trace record `index`. Inputs and initializer seeds
    /// depend only on the plan seed and the index, never on the strategy.
    pub fn request(&self, index: usize) -> InferenceRequest {
        let record = &self.trace[index];
        let entry = self.models.get(&record.model_id).expect("validated plan");
        let mut rng = SplitMix64::new(self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let init_seed = rng.next_u64();
        let input = (0..entry.model.input_len()).map(|_| rng.next_signed_f32()).collect();
        InferenceRequest {
            request_id: index as u64,
            model: Arc::clone(&entry.model),
            weights: Arc::clone(&entry.weights),
            input,
            arrival_ts: record.offset_us(),
            init_seed,
        }
    }

    fn sim_config(&self, strategy: StrategyConfig) -> SimConfig {
        SimConfig {
            strategy,
            scheduler: self.scheduler.clone(),
            max_parallel_reads: self.max_parallel_reads,
            disk_delay: self.disk_delay.clone(),
            skip_factor: self.skip_factor,
            max_in_flight: self.max_in_flight,
            ..SimConfig::default()
        }
    }

    fn runtime_config(&self, strategy: StrategyConfig) -> RuntimeConfig {
        RuntimeConfig {
            strategy,
            scheduler: self.scheduler.clone(),
            engine: EngineConfig {
                max_parallel_reads: self.max_parallel_reads,
                delay: self.disk_delay.clone(),
                ..EngineConfig::default()
            },
            skip_factor: self.skip_factor,
            time_scale: self.time_scale,
            max_in_flight: self.max_in_flight,
        }
    }
}

/// One (strategy, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: StrategyName,
    pub model_id: String,
    pub requests: usize,
    pub completed: usize,
    /// Set when a request failed; the statistics then cover only the
    /// completed requests.
    pub error: Option<String>,
    pub mean_latency_us: f64,
    pub p50_latency_us: u64,
    pub p99_latency_us: u64,
    pub mean_layer_wait_us: f64,
    pub mean_utilization: f64,
    pub min_utilization: f64,
    /// Summed over requests.
    pub working_us: BTreeMap<Stage, u64>,
    pub waiting_us: BTreeMap<Stage, u64>,
    pub peak_payload_bytes: BTreeMap<MemBucket, u64>,
    pub peak_resident_bytes: u64,
    pub scheduler_actions: usize,
    pub max_admission_error_us: u64,
}

/// Per-request line of `requests.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub strategy: StrategyName,
    pub model_id: String,
    pub repeat: u32,
    pub request_id: u64,
    pub offset_us: u64,
    pub arrival_us: u64,
    pub admitted_us: u64,
    pub latency_us: u64,
    pub layer_wait_us: u64,
    pub utilization: f64,
    /// Hex of the first four weight bytes applied per layer.
    pub fingerprint: String,
}

/// Event log of one cell (last repeat).
#[derive(Debug, Clone)]
pub struct CellLog {
    pub strategy: StrategyName,
    pub model_id: String,
    pub log: EventLog,
    pub memory: MemoryTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub mode: DriverMode,
    pub time_scale: f64,
    pub repeat_count: u32,
    pub trace_len: usize,
    /// Requests admitted per minute, by strategy.
    pub admission_histogram: BTreeMap<StrategyName, Vec<u64>>,
    pub max_admission_error_us: u64,
    pub cells: Vec<CellReport>,
    #[serde(skip)]
    pub requests: Vec<RequestRow>,
    #[serde(skip)]
    pub logs: Vec<CellLog>,
}

impl ComparisonReport {
    pub fn cell(&self, strategy: StrategyName, model_id: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.strategy == strategy && c.model_id == model_id)
    }

    pub fn to_json(&self) -> Result<String, WorkloadError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per cell with the scalar columns.
    pub fn cells_csv(&self) -> Result<String, WorkloadError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "model_id",
            "requests",
            "completed",
            "mean_latency_us",
            "p50_latency_us",
            "p99_latency_us",
            "mean_layer_wait_us",
            "mean_utilization",
            "min_utilization",
            "peak_placeholder_bytes",
            "peak_resident_bytes",
            "scheduler_actions",
            "error",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.strategy.to_string(),
                c.model_id.clone(),
                c.requests.to_string(),
                c.completed.to_string(),
                c.mean_latency_us.to_string(),
                c.p50_latency_us.to_string(),
                c.p99_latency_us.to_string(),
                c.mean_layer_wait_us.to_string(),
                c.mean_utilization.to_string(),
                c.min_utilization.to_string(),
                c.peak_payload_bytes.get(&MemBucket::Placeholders).copied().unwrap_or(0).to_string(),
                c.peak_resident_bytes.to_string(),
                c.scheduler_actions.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        into_string(w)
    }

    pub fn requests_csv(&self) -> Result<String, WorkloadError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.requests {
            w.serialize(r)?;
        }
        into_string(w)
    }

    /// `report.json`, `cells.csv`, `requests.csv`, and per cell an event
    /// log (JSON and CSV), a Gantt SVG of its first requests and memory
    /// samples.
    pub fn write_artifacts(&self, dir: &Path, memory_cadence_us: u64) -> Result<(), WorkloadError> {
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| WorkloadError::io(&p, e))
        };
        fs::create_dir_all(dir).map_err(|e| WorkloadError::io(dir, e))?;
        write("report.json", &self.to_json()?)?;
        write("cells.csv", &self.cells_csv()?)?;
        write("requests.csv", &self.requests_csv()?)?;
        for cell in &self.logs {
            let stem = format!("{}-{}", cell.strategy, cell.model_id);
            write(&format!("{stem}.events.json"), &to_json(&cell.log)?)?;
            write(&format!("{stem}.events.csv"), &to_csv(&cell.log.events)?)?;
            let shown: Vec<u64> = {
                let mut ids: Vec<u64> = cell.log.events.iter().map(|e| e.request_id).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.truncate(GANTT_REQUESTS);
                ids
            };
            let mut head = EventLog::new(cell.log.header.clone());
            head.events = cell.log.events.iter().filter(|e| shown.contains(&e.request_id)).copied().collect();
            head.alloc_segments =
                cell.log.alloc_segments.iter().filter(|a| shown.contains(&a.request_id)).copied().collect();
            if !head.events.is_empty() {
                write(&format!("{stem}.gantt.svg"), &render_svg(&head))?;
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["ts_us", "resident_bytes", "placeholders", "full_params", "shard_buffers"])?;
            for s in cell.memory.samples(memory_cadence_us.max(1)) {
                let b = |k| s.breakdown.get(&k).copied().unwrap_or(0).to_string();
                w.write_record([
                    s.ts.to_string(),
                    s.resident_bytes.to_string(),
                    b(MemBucket::Placeholders),
                    b(MemBucket::FullParams),
                    b(MemBucket::ShardBuffers),
                ])?;
            }
            write(&format!("{stem}.memory.csv"), &into_string(w)?)?;
        }
        Ok(())
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String, WorkloadError> {
    let bytes = w.into_inner().map_err(|e| WorkloadError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

struct CellRun {
    results: Vec<Result<InferenceResult, (u64, PipelineError)>>,
    log: EventLog,
    memory: MemoryTrace,
    peak_payload: BTreeMap<MemBucket, u64>,
    peak_resident: u64,
    scheduler_actions: usize,
}

/// Runs every (strategy, model) cell `repeat_count` times. A failed request
/// marks its cell; other cells still run.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ComparisonReport, WorkloadError> {
    plan.validate()?;
    let mut by_model: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in plan.trace.iter().enumerate() {
        by_model.entry(&r.model_id).or_default().push(i);
    }
    let duration_min = plan.trace.last().map_or(0, |r| r.offset_ms / 60_000 + 1) as u32;
    let mut report = ComparisonReport {
        seed: plan.seed,
        mode: plan.mode,
        time_scale: plan.time_scale,
        repeat_count: plan.repeat_count,
        trace_len: plan.trace.len(),
        admission_histogram: BTreeMap::new(),
        max_admission_error_us: 0,
        cells: Vec::new(),
        requests: Vec::new(),
        logs: Vec::new(),
    };
    for &strategy in &plan.strategies {
        let mut admissions = Vec::with_capacity(plan.trace.len());
        for (&model_id, indices) in &by_model {
            let mut latencies = Vec::new();
            let mut layer_waits = Vec::new();
            let mut utils = Vec::new();
            let mut working: BTreeMap<Stage, u64> = BTreeMap::new();
            let mut waiting: BTreeMap<Stage, u64> = BTreeMap::new();
            let mut error = None;
            let mut max_err = 0u64;
            let mut last = None;
            for repeat in 0..plan.repeat_count {
                let requests: Vec<InferenceRequest> = indices.iter().map(|&i| plan.request(i)).collect();
                let run = match plan.mode {
                    DriverMode::Virtual => run_virtual(plan, strategy, requests),
                    DriverMode::Real => run_real(plan, strategy, requests),
                };
                let per_request = utilization_by_request(&run.log.events)?;
                for result in &run.results {
                    let res = match result {
                        Ok(res) => res,
                        Err((id, e)) => {
                            error.get_or_insert_with(|| format!("request {id}: {e}"));
                            continue;
                        }
                    };
                    let offset = plan.trace[res.request_id as usize].offset_us();
                    let err = res.arrival_ts.abs_diff(offset);
                    max_err = max_err.max(err);
                    if repeat == 0 {
                        admissions.push(res.arrival_ts / 1000);
                    }
                    latencies.push(res.latency);
                    layer_waits.push(res.layer_wait);
                    let u = per_request.get(&res.request_id);
                    let util = u.map_or(0.0, |u| u.utilization);
                    utils.push(util);
                    if let Some(u) = u {
                        for (s, v) in &u.per_stage_working {
                            *working.entry(*s).or_default() += v;
                        }
                        for (s, v) in &u.per_stage_waiting {
                            *waiting.entry(*s).or_default() += v;
                        }
                    }
                    report.requests.push(RequestRow {
                        strategy: strategy.name,
                        model_id: model_id.to_string(),
                        repeat,
                        request_id: res.request_id,
                        offset_us: offset,
                        arrival_us: res.arrival_ts,
                        admitted_us: res.admitted_ts,
                        latency_us: res.latency,
                        layer_wait_us: res.layer_wait,
                        utilization: util,
                        fingerprint: res.fingerprints.iter().flatten().map(|b| format!("{b:02x}")).collect(),
                    });
                }
                last = Some(run);
            }
            let run = last.expect("repeat_count >= 1");
            report.max_admission_error_us = report.max_admission_error_us.max(max_err);
            report.cells.push(CellReport {
                strategy: strategy.name,
                model_id: model_id.to_string(),
                requests: indices.len(),
                completed: run.results.iter().filter(|r| r.is_ok()).count(),
                error,
                mean_latency_us: mean(&latencies),
                p50_latency_us: percentile(&latencies, 50.0),
                p99_latency_us: percentile(&latencies, 99.0),
                mean_layer_wait_us: mean(&layer_waits),
                mean_utilization: if utils.is_empty() { 0.0 } else { utils.iter().sum::<f64>() / utils.len() as f64 },
                min_utilization: utils.iter().copied().reduce(f64::min).unwrap_or(0.0),
                working_us: working,
                waiting_us: waiting,
                peak_payload_bytes: run.peak_payload,
                peak_resident_bytes: run.peak_resident,
                scheduler_actions: run.scheduler_actions,
                max_admission_error_us: max_err,
            });
            report.logs.push(CellLog {
                strategy: strategy.name,
                model_id: model_id.to_string(),
                log: run.log,
                memory: run.memory,
            });
        }
        report.admission_histogram.insert(strategy.name, minute_histogram(admissions, duration_min));
    }
    Ok(report)
}

fn header(plan: &ExperimentPlan, strategy: StrategyConfig, model_id: &str) -> RunHeader {
    RunHeader {
        strategy: strategy.name.to_string(),
        model_id: model_id.to_string(),
        seed: plan.seed,
        time_scale: plan.time_scale,
        wall_clock: None,
    }
}

fn run_virtual(plan: &ExperimentPlan, strategy: StrategyConfig, requests: Vec<InferenceRequest>) -> CellRun {
    let model_id = requests.first().map(|r| r.model.model_id.clone()).unwrap_or_default();
    let out = Simulator::new(plan.sim_config(strategy)).run(requests);
    let log = out.event_log(header(plan, strategy, &model_id));
    CellRun {
        results: out.results.into_iter().map(|r| r.map_err(|f| (f.request_id, f.error))).collect(),
        log,
        memory: out.memory,
        peak_payload: out.peak_payload,
        peak_resident: out.peak_resident,
        scheduler_actions: out.decisions.len(),
    }
}

fn run_real(plan: &ExperimentPlan, strategy: StrategyConfig, mut requests: Vec<InferenceRequest>) -> CellRun {
    let model_id = requests.first().map(|r| r.model.model_id.clone()).unwrap_or_default();
    requests.sort_by_key(|r| r.arrival_ts);
    let rt = Runtime::start(plan.runtime_config(strategy));
    let clock = rt.clock();
    let handles: Vec<_> = requests
        .into_iter()
        .map(|r| {
            clock.sleep_until(r.arrival_ts);
            (r.request_id, rt.submit(r))
        })
        .collect();
    let mut results: Vec<_> = handles.into_iter().map(|(id, h)| h.wait().map_err(|e| (id, e))).collect();
    results.sort_by_key(|r| match r {
        Ok(res) => res.request_id,
        Err((id, _)) => *id,
    });
    let mut h = header(plan, strategy, &model_id);
    h.wall_clock = Some(crate::clock::unix_seconds());
    let log = rt.event_log(h);
    CellRun {
        results,
        log,
        memory: rt.memory().trace(),
        peak_payload: MemBucket::ALL.iter().map(|&b| (b, rt.peak_payload(b))).collect(),
        peak_resident: rt.memory().peak_resident(),
        scheduler_actions: rt.decisions().len(),
    }
}

fn mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Nearest-rank percentile.
fn percentile(values: &[u64], p: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn empty_plan_is_rejected() {
        let mut plan = ExperimentPlan::new(Vec::new(), ModelCatalog::new(), 0);
        plan.strategies.clear();
        assert!(matches!(plan.validate(), Err(WorkloadError::InvalidPlan(_))));
    }
}
