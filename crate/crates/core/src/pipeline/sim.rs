use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use super::{InferenceRequest, InferenceResult, PipelineError, StrategyConfig};
use crate::catalog::WeightShard;
use crate::decoupler::{
    release_layer_buffers, Completion, DiskDelay, EngineNotice, Priority, RetrievalTask, SimRetrievalEngine, TaskId,
    Transition,
};
use crate::metrics::{
    AllocSegment, EventLog, MemBucket, MemoryAccountant, MemoryTrace, RunHeader, Stage, StageInterval,
};
use crate::miniloader::{
    forward_affine, register_parameters, restore_and_apply, ParameterBlock, BLOCK_HEADER_BYTES, DEFAULT_SKIP_FACTOR,
};
use crate::pipeline::DependencyTracker;
use crate::scheduler::{Decision, DecisionRecord, Scheduler, SchedulerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub strategy: StrategyConfig,
    pub scheduler: SchedulerConfig,
    pub max_parallel_reads: usize,
    pub disk_delay: DiskDelay,
    pub skip_factor: f64,
    pub max_in_flight: usize,
    pub memory_cadence_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::CICADA,
            scheduler: SchedulerConfig::default(),
            max_parallel_reads: 1,
            disk_delay: DiskDelay::None,
            skip_factor: DEFAULT_SKIP_FACTOR,
            max_in_flight: 8,
            memory_cadence_us: 10_000,
        }
    }
}

impl SimConfig {
    pub fn for_strategy(strategy: StrategyConfig) -> Self {
        Self { strategy, ..Self::default() }
    }
}

#[derive(Debug)]
pub struct RequestFailure {
    pub request_id: u64,
    pub error: PipelineError,
}

#[derive(Debug)]
pub struct SimOutcome {
    /// One entry per submitted request, in submission order.
    pub results: Vec<Result<InferenceResult, RequestFailure>>,
    pub events: Vec<StageInterval>,
    pub alloc_segments: Vec<AllocSegment>,
    pub memory: MemoryTrace,
    pub peak_payload: BTreeMap<MemBucket, u64>,
    pub peak_resident: u64,
    pub memory_cadence_us: u64,
    pub decisions: Vec<DecisionRecord>,
    pub transitions: Vec<Transition>,
    pub tasks: Vec<RetrievalTask>,
    pub end_time: u64,
}

impl SimOutcome {
    pub fn event_log(&self, header: RunHeader) -> EventLog {
        let mut log = EventLog { header, events: self.events.clone(), alloc_segments: self.alloc_segments.clone() };
        log.sort();
        log
    }

    pub fn ok_results(&self) -> impl Iterator<Item = &InferenceResult> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }
}

/// Discrete-event driver: one construction, one apply and one execute
/// worker shared FIFO by all requests, plus the virtual-clock retrieval
/// engine. Stage durations come from the layer costs; weights, placeholders
/// and activations are real data.
#[derive(Debug, Clone, Default)]
pub struct Simulator {
    config: SimConfig,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn run(&self, requests: Vec<InferenceRequest>) -> SimOutcome {
        Des::new(&self.config, requests).run()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Unit {
    L = 0,
    A = 1,
    E = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrive(usize),
    Finish(Unit),
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobKind {
    Construct,
    Apply,
    Load,
    Execute,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    req: usize,
    layer: usize,
    kind: JobKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Construct,
    Materialize,
    Retrieve,
    Apply,
    Execute,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    job: Job,
    phase: Phase,
    start: u64,
}

#[derive(Debug, Default)]
struct Worker {
    queue: VecDeque<Job>,
    current: Option<Running>,
}

#[derive(Debug)]
struct ReqState {
    request: InferenceRequest,
    tracker: DependencyTracker,
    admitted: Option<u64>,
    blocks: Vec<Option<ParameterBlock<f32>>>,
    materialize: Vec<u64>,
    shards: Vec<Option<WeightShard>>,
    tasks: Vec<Option<TaskId>>,
    activation: Vec<f32>,
    events: Vec<StageInterval>,
    allocs: Vec<AllocSegment>,
    fingerprints: Vec<[u8; 4]>,
    first_l_start: Option<u64>,
    finished_at: Option<u64>,
    error: Option<PipelineError>,
}

impl ReqState {
    fn done(&self) -> bool {
        self.finished_at.is_some() || self.error.is_some()
    }

    fn id(&self) -> u64 {
        self.request.request_id
    }
}

struct Des<'a> {
    cfg: &'a SimConfig,
    decoupled: bool,
    scheduling: bool,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    reqs: Vec<ReqState>,
    units: [Worker; 3],
    engine: SimRetrievalEngine,
    scheduler: Scheduler,
    memory: MemoryAccountant,
    owner: HashMap<TaskId, usize>,
    in_flight: usize,
    waiting: VecDeque<usize>,
    tick_pending: bool,
}

impl<'a> Des<'a> {
    fn new(cfg: &'a SimConfig, requests: Vec<InferenceRequest>) -> Self {
        let scheduling = cfg.strategy.enable_priority_scheduler && cfg.scheduler.enabled;
        let reqs = requests
            .into_iter()
            .map(|request| {
                let n = request.model.layer_count();
                ReqState {
                    tracker: DependencyTracker::new(n),
                    admitted: None,
                    blocks: (0..n).map(|_| None).collect(),
                    materialize: vec![0; n],
                    shards: (0..n).map(|_| None).collect(),
                    tasks: vec![None; n],
                    activation: request.input.clone(),
                    events: Vec::with_capacity(4 * n),
                    allocs: Vec::new(),
                    fingerprints: vec![[0; 4]; n],
                    first_l_start: None,
                    finished_at: None,
                    error: None,
                    request,
                }
            })
            .collect();
        Self {
            cfg,
            decoupled: cfg.strategy.enable_decoupler,
            scheduling,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            reqs,
            units: Default::default(),
            engine: SimRetrievalEngine::new(cfg.max_parallel_reads, cfg.disk_delay.clone()),
            scheduler: Scheduler::new(SchedulerConfig { enabled: scheduling, ..cfg.scheduler.clone() }),
            memory: MemoryAccountant::new(),
            owner: HashMap::new(),
            in_flight: 0,
            waiting: VecDeque::new(),
            tick_pending: false,
        }
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn run(mut self) -> SimOutcome {
        for i in 0..self.reqs.len() {
            let at = self.reqs[i].request.arrival_ts;
            self.push(at, Ev::Arrive(i));
        }
        loop {
            let heap_t = self.heap.peek().map(|Reverse((t, _, _))| *t);
            let engine_t = self.engine.next_event_time();
            match (heap_t, engine_t) {
                (None, None) => break,
                (h, Some(e)) if h.is_none_or(|h| e <= h) => {
                    self.now = self.now.max(e);
                    self.engine.advance_to(self.now);
                    self.pump();
                    self.check_stalls();
                }
                _ => {
                    let Reverse((t, _, ev)) = self.heap.pop().unwrap();
                    self.now = self.now.max(t);
                    match ev {
                        Ev::Arrive(i) => self.arrive(i),
                        Ev::Finish(unit) => self.finish(unit),
                        Ev::Tick => self.tick(),
                    }
                }
            }
        }
        for i in 0..self.reqs.len() {
            if !self.reqs[i].done() {
                self.fail(i, PipelineError::InvariantViolation("request never completed".into()));
            }
        }
        self.into_outcome()
    }

    fn into_outcome(self) -> SimOutcome {
        let mut events = Vec::new();
        let mut alloc_segments = Vec::new();
        let mut results = Vec::with_capacity(self.reqs.len());
        for r in self.reqs {
            events.extend_from_slice(&r.events);
            alloc_segments.extend_from_slice(&r.allocs);
            let request_id = r.id();
            results.push(match (r.error, r.finished_at) {
                (Some(error), _) => Err(RequestFailure { request_id, error }),
                (None, Some(end)) => {
                    let mut evs = r.events;
                    evs.sort_by_key(|e| (e.start, e.stage, e.layer_index));
                    let arrival = r.request.arrival_ts;
                    Ok(InferenceResult {
                        request_id,
                        output: r.activation,
                        arrival_ts: arrival,
                        admitted_ts: r.admitted.unwrap_or(arrival),
                        latency: end - arrival,
                        layer_wait: r.first_l_start.unwrap_or(arrival) - arrival,
                        events: evs,
                        alloc_segments: r.allocs,
                        fingerprints: r.fingerprints,
                    })
                }
                (None, None) => unreachable!("unfinished requests are failed above"),
            });
        }
        let mut log = EventLog::new(RunHeader {
            strategy: String::new(),
            model_id: String::new(),
            seed: 0,
            time_scale: 1.0,
            wall_clock: None,
        });
        log.events = events;
        log.alloc_segments = alloc_segments;
        log.sort();
        SimOutcome {
            results,
            events: log.events,
            alloc_segments: log.alloc_segments,
            memory: self.memory.trace(),
            peak_payload: MemBucket::ALL.iter().map(|&b| (b, self.memory.peak_payload(b))).collect(),
            peak_resident: self.memory.peak_resident(),
            memory_cadence_us: self.cfg.memory_cadence_us,
            decisions: self.scheduler.decision_log().to_vec(),
            transitions: self.engine.table().transitions().to_vec(),
            tasks: self.engine.table().tasks().cloned().collect(),
            end_time: self.now,
        }
    }

    // ---- admission -------------------------------------------------------

    fn arrive(&mut self, i: usize) {
        if self.in_flight < self.cfg.max_in_flight {
            self.admit(i);
        } else {
            self.waiting.push_back(i);
        }
    }

    fn admit_waiting(&mut self) {
        while self.in_flight < self.cfg.max_in_flight {
            match self.waiting.pop_front() {
                Some(i) => self.admit(i),
                None => break,
            }
        }
    }

    fn admit(&mut self, i: usize) {
        self.in_flight += 1;
        self.reqs[i].admitted = Some(self.now);
        let id = self.reqs[i].id();
        self.scheduler.on_arrival(id, self.now);
        if let Err(e) = self.reqs[i].request.validate() {
            self.fail(i, e);
            return;
        }
        let n = self.reqs[i].tracker.len();
        for layer in 0..n {
            self.units[Unit::L as usize].queue.push_back(Job { req: i, layer, kind: JobKind::Construct });
        }
        if self.decoupled {
            for layer in 0..n {
                self.issue_retrieval(i, layer);
            }
            self.pump();
        }
        self.kick(Unit::L);
    }

    fn issue_retrieval(&mut self, i: usize, layer: usize) {
        let r = &self.reqs[i];
        let spec = &r.request.model.layers[layer];
        let path = r.request.weights.file_path(spec.layer_index).expect("validated at admission");
        let (id, cost, layer_index) = (r.id(), spec.retrieval_cost, spec.layer_index);
        let task = self.engine.enqueue(id, layer_index, path, cost, cost, self.now);
        self.owner.insert(task, i);
        self.reqs[i].tasks[layer] = Some(task);
        if self.scheduling {
            self.scheduler.on_issue(id, layer_index, task, cost);
            self.ensure_tick();
        }
    }

    // ---- workers ---------------------------------------------------------

    fn kick(&mut self, unit: Unit) {
        while self.units[unit as usize].current.is_none() {
            let Some(job) = self.units[unit as usize].queue.pop_front() else {
                return;
            };
            if self.reqs[job.req].done() {
                continue;
            }
            self.start(unit, job);
        }
    }

    fn begin(&mut self, unit: Unit, job: Job, phase: Phase, duration: Option<u64>) {
        self.units[unit as usize].current = Some(Running { job, phase, start: self.now });
        if let Some(d) = duration {
            self.push(self.now + d, Ev::Finish(unit));
        }
    }

    fn start(&mut self, unit: Unit, job: Job) {
        let now = self.now;
        let r = &mut self.reqs[job.req];
        let spec = r.request.model.layers[job.layer].clone();
        match job.kind {
            JobKind::Construct => {
                r.first_l_start.get_or_insert(now);
                let id = r.id();
                let seed = r.request.init_seed;
                match register_parameters::<f32>(
                    &spec,
                    self.cfg.strategy.registration_mode(),
                    seed,
                    self.cfg.skip_factor,
                ) {
                    Ok(reg) => {
                        r.blocks[job.layer] = Some(reg.block);
                        r.materialize[job.layer] = reg.timing.materialize;
                        self.scheduler.on_construction_start(id, spec.layer_index, now);
                        let d = spec.instantiate_cost + reg.timing.bookkeeping;
                        self.begin(unit, job, Phase::Construct, Some(d));
                    }
                    Err(e) => self.fail(job.req, e.into()),
                }
            }
            JobKind::Apply => self.begin(unit, job, Phase::Apply, Some(spec.apply_cost)),
            JobKind::Execute => self.begin(unit, job, Phase::Execute, Some(spec.compute_cost)),
            JobKind::Load => {
                self.begin(unit, job, Phase::Retrieve, None);
                self.issue_retrieval(job.req, job.layer);
                self.pump();
            }
        }
    }

    fn record(&mut self, i: usize, stage: Stage, layer: usize, start: u64, end: u64) {
        let r = &mut self.reqs[i];
        r.events.push(StageInterval { request_id: r.request.request_id, stage, layer_index: layer as u32, start, end });
    }

    fn finish(&mut self, unit: Unit) {
        let Some(Running { job, phase, start }) = self.units[unit as usize].current.take() else {
            return;
        };
        if !self.reqs[job.req].done() {
            let outcome = match phase {
                Phase::Construct => self.construct_done(unit, job, start),
                Phase::Materialize => {
                    let r = &mut self.reqs[job.req];
                    r.allocs.push(AllocSegment {
                        request_id: r.request.request_id,
                        layer_index: job.layer as u32,
                        start,
                        end: self.now,
                    });
                    self.constructed(job.req, job.layer);
                    Ok(())
                }
                Phase::Apply => self.apply_done(job, start),
                Phase::Execute => self.execute_done(job, start),
                Phase::Retrieve => unreachable!("retrieval phases end on engine completion"),
            };
            if let Err(e) = outcome {
                self.fail(job.req, e);
            }
        }
        if self.units[unit as usize].current.is_none() {
            self.kick(unit);
        }
        self.check_stalls();
    }

    fn construct_done(&mut self, unit: Unit, job: Job, start: u64) -> Result<(), PipelineError> {
        self.record(job.req, Stage::L, job.layer, start, self.now);
        let r = &self.reqs[job.req];
        let payload = r.blocks[job.layer].as_ref().map_or(0, |b| b.payload_bytes());
        self.memory.charge_block(
            self.now,
            r.id(),
            job.layer as u32,
            MemBucket::Placeholders,
            payload,
            BLOCK_HEADER_BYTES,
        );
        let m = r.materialize[job.layer];
        if m > 0 {
            self.begin(unit, job, Phase::Materialize, Some(m));
        } else {
            self.constructed(job.req, job.layer);
        }
        Ok(())
    }

    fn constructed(&mut self, i: usize, layer: usize) {
        self.reqs[i].tracker.mark_constructed(layer);
        if self.decoupled {
            self.dispatch_apply(i, layer);
        } else {
            self.dispatch_load(i, layer);
        }
    }

    fn dispatch_apply(&mut self, i: usize, layer: usize) {
        if layer < self.reqs[i].tracker.len() && self.reqs[i].tracker.claim_apply(layer) {
            self.units[Unit::A as usize].queue.push_back(Job { req: i, layer, kind: JobKind::Apply });
            self.kick(Unit::A);
        }
    }

    fn dispatch_load(&mut self, i: usize, layer: usize) {
        if layer < self.reqs[i].tracker.len() && self.reqs[i].tracker.claim_load(layer) {
            self.units[Unit::A as usize].queue.push_back(Job { req: i, layer, kind: JobKind::Load });
            self.kick(Unit::A);
        }
    }

    fn dispatch_execute(&mut self, i: usize, layer: usize) {
        if layer < self.reqs[i].tracker.len() && self.reqs[i].tracker.claim_execute(layer) {
            self.units[Unit::E as usize].queue.push_back(Job { req: i, layer, kind: JobKind::Execute });
            self.kick(Unit::E);
        }
    }

    fn apply_done(&mut self, job: Job, start: u64) -> Result<(), PipelineError> {
        let now = self.now;
        self.record(job.req, Stage::A, job.layer, start, now);
        let r = &mut self.reqs[job.req];
        let shard = r.shards[job.layer]
            .take()
            .ok_or_else(|| PipelineError::InvariantViolation(format!("layer {} applied without weights", job.layer)))?;
        let block = r.blocks[job.layer].take().ok_or_else(|| {
            PipelineError::InvariantViolation(format!("layer {} applied before construction", job.layer))
        })?;
        let block = restore_and_apply(block, &shard)?;
        let mut fp = [0u8; 4];
        let n = shard.payload.len().min(4);
        fp[..n].copy_from_slice(&shard.payload[..n]);
        r.fingerprints[job.layer] = fp;
        self.memory.charge_block(
            now,
            r.id(),
            job.layer as u32,
            MemBucket::FullParams,
            block.payload_bytes(),
            BLOCK_HEADER_BYTES,
        );
        r.blocks[job.layer] = Some(block);
        r.tracker.mark_applied(job.layer)?;
        self.dispatch_execute(job.req, job.layer);
        if self.decoupled {
            self.dispatch_apply(job.req, job.layer + 1);
        } else {
            self.dispatch_load(job.req, job.layer + 1);
        }
        Ok(())
    }

    fn execute_done(&mut self, job: Job, start: u64) -> Result<(), PipelineError> {
        let now = self.now;
        self.record(job.req, Stage::E, job.layer, start, now);
        let decoupled = self.decoupled;
        let r = &mut self.reqs[job.req];
        let spec = &r.request.model.layers[job.layer];
        let block = r.blocks[job.layer].as_ref().ok_or_else(|| {
            PipelineError::InvariantViolation(format!("layer {} executed without parameters", job.layer))
        })?;
        r.activation = forward_affine(block, &r.activation, spec)?;
        r.tracker.mark_executed(job.layer)?;
        if decoupled {
            r.blocks[job.layer] = None;
            release_layer_buffers(&self.memory, now, r.id(), job.layer as u32);
        }
        if r.tracker.all_executed() {
            self.complete(job.req);
        } else {
            self.dispatch_execute(job.req, job.layer + 1);
        }
        Ok(())
    }

    fn complete(&mut self, i: usize) {
        let now = self.now;
        let r = &mut self.reqs[i];
        r.finished_at = Some(now);
        r.blocks.iter_mut().for_each(|b| *b = None);
        let id = r.id();
        self.memory.release_request(now, id);
        self.scheduler.forget_request(id);
        self.in_flight -= 1;
        self.admit_waiting();
    }

    fn fail(&mut self, i: usize, error: PipelineError) {
        if self.reqs[i].done() {
            return;
        }
        let now = self.now;
        let id = self.reqs[i].id();
        let admitted = self.reqs[i].admitted.is_some();
        self.reqs[i].error = Some(error);
        let tasks: Vec<TaskId> = self.reqs[i].tasks.iter().flatten().copied().collect();
        for t in tasks {
            let terminal = self.engine.table().get(t).is_some_and(|t| t.state.is_terminal());
            if !terminal {
                for r in self.scheduler.on_retrieval_done(t, now) {
                    let _ = self.engine.resume(r, now);
                }
                let _ = self.engine.suspend(t, now);
            }
        }
        self.memory.release_request(now, id);
        self.scheduler.forget_request(id);
        let a = Unit::A as usize;
        if self.units[a].current.is_some_and(|c| c.job.req == i && c.phase == Phase::Retrieve) {
            self.units[a].current = None;
            self.kick(Unit::A);
        }
        if admitted {
            self.in_flight -= 1;
            self.admit_waiting();
        }
    }

    // ---- retrieval and scheduling -----------------------------------------

    fn pump(&mut self) {
        loop {
            let notices = self.engine.drain_notices();
            for n in &notices {
                if let EngineNotice::Started { task, ts, .. } = *n {
                    self.scheduler.on_retrieval_start(task, ts);
                }
            }
            let completions = self.engine.drain_completions();
            if notices.is_empty() && completions.is_empty() {
                return;
            }
            for c in completions {
                self.retrieval_done(c);
            }
        }
    }

    fn retrieval_done(&mut self, c: Completion) {
        let now = self.now;
        for t in self.scheduler.on_retrieval_done(c.task_id, now) {
            let _ = self.engine.resume(t, now);
        }
        let Some(&i) = self.owner.get(&c.task_id) else {
            return;
        };
        if self.reqs[i].done() {
            return;
        }
        let layer = c.layer_index as usize;
        let signal = match c.result {
            Ok(s) => s,
            Err(source) => {
                self.fail(i, PipelineError::Retrieval { layer: c.layer_index, source });
                return;
            }
        };
        self.record(i, Stage::R, layer, signal.started_at, signal.completed_at);
        let id = self.reqs[i].id();
        self.memory.charge_shard(now, id, c.layer_index, signal.shard.encoded_len() as u64);
        self.reqs[i].shards[layer] = Some(signal.shard);
        self.reqs[i].tracker.mark_retrieved(layer);
        if self.decoupled {
            self.dispatch_apply(i, layer);
        } else {
            let a = Unit::A as usize;
            match self.units[a].current {
                Some(Running { job, phase: Phase::Retrieve, .. }) if job.req == i && job.layer == layer => {
                    let cost = self.reqs[i].request.model.layers[layer].apply_cost;
                    self.begin(Unit::A, Job { kind: JobKind::Apply, ..job }, Phase::Apply, Some(cost));
                }
                _ => self.fail(
                    i,
                    PipelineError::InvariantViolation(format!("monolithic load of layer {layer} lost its worker")),
                ),
            }
        }
    }

    fn ensure_tick(&mut self) {
        if self.scheduling && !self.tick_pending {
            let tick = self.cfg.scheduler.tick_us.max(1);
            self.tick_pending = true;
            self.push((self.now / tick + 1) * tick, Ev::Tick);
        }
    }

    fn tick(&mut self) {
        self.tick_pending = false;
        let now = self.now;
        for d in self.scheduler.tick(now) {
            if let Decision::Boosted { task, suspend, .. } = d {
                let _ = self.engine.set_priority(task, Priority::High, now);
                for t in suspend {
                    let _ = self.engine.suspend(t, now);
                }
            }
        }
        self.pump();
        self.check_stalls();
        if self.scheduler.in_flight() > 0 {
            self.ensure_tick();
        }
    }

    /// Apply worker idle while the next layer of some request waits only
    /// for its weights: raise that retrieval.
    fn check_stalls(&mut self) {
        if !self.scheduling {
            return;
        }
        let a = &self.units[Unit::A as usize];
        if a.current.is_some() || !a.queue.is_empty() {
            return;
        }
        let mut boosts = Vec::new();
        for r in &mut self.reqs {
            if r.admitted.is_none() || r.done() {
                continue;
            }
            let next = r.tracker.applied_count();
            if next < r.tracker.len() && r.tracker.stalled_on_retrieval(next) {
                if let Some(task) = self.scheduler.stall_boost(r.request.request_id, next as u32, self.now) {
                    boosts.push(task);
                }
            }
        }
        for task in boosts {
            let _ = self.engine.set_priority(task, Priority::High, self.now);
        }
        self.pump();
    }
}
