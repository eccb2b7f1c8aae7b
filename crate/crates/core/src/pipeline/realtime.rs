use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{DependencyTracker, InferenceRequest, InferenceResult, PipelineError, StrategyConfig};
use crate::catalog::WeightShard;
use crate::clock::{unix_seconds, RunClock};
use crate::decoupler::{
    release_layer_buffers, Completion, EngineConfig, EngineNotice, Priority, RetrievalEngine, TaskId, Transition,
};
use crate::metrics::{
    AllocSegment, EventLog, MemBucket, MemoryAccountant, MemorySample, Record, Recorder, RunHeader, Stage,
    StageInterval,
};
use crate::miniloader::{
    forward_affine, register_parameters, restore_and_apply, ParameterBlock, BLOCK_HEADER_BYTES, DEFAULT_SKIP_FACTOR,
};
use crate::scheduler::{Decision, DecisionRecord, Scheduler, SchedulerConfig};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub strategy: StrategyConfig,
    pub scheduler: SchedulerConfig,
    pub engine: EngineConfig,
    pub skip_factor: f64,
    /// Real seconds per model second.
    pub time_scale: f64,
    pub max_in_flight: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::CICADA,
            scheduler: SchedulerConfig::default(),
            engine: EngineConfig::default(),
            skip_factor: DEFAULT_SKIP_FACTOR,
            time_scale: 1.0 / 16.0,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Construct,
    Apply,
    Load,
    Execute,
}

enum WorkerMsg {
    Job(Arc<ReqCtx>, usize, Kind),
    Stop,
}

enum SchedMsg {
    Arrival(u64, u64),
    ConstructionStart(u64, u32, u64),
    Issue { request_id: u64, layer: u32, task: TaskId, estimate: u64 },
    Notice(EngineNotice),
    Retire(TaskId),
    Forget(u64),
    Stop,
}

#[derive(Debug)]
struct ReqCtx {
    request: InferenceRequest,
    tracker: DependencyTracker,
    blocks: Mutex<Vec<Option<ParameterBlock<f32>>>>,
    shards: Mutex<Vec<Option<WeightShard>>>,
    tasks: Mutex<Vec<Option<TaskId>>>,
    activation: Mutex<Vec<f32>>,
    events: Mutex<Vec<StageInterval>>,
    allocs: Mutex<Vec<AllocSegment>>,
    fingerprints: Mutex<Vec<[u8; 4]>>,
    first_l_start: Mutex<Option<u64>>,
    admitted: Mutex<Option<u64>>,
    outcome: Mutex<Option<Result<u64, PipelineError>>>,
    done_cv: Condvar,
    finished: AtomicBool,
}

impl ReqCtx {
    fn id(&self) -> u64 {
        self.request.request_id
    }

    fn finished(&self) -> bool {
        self.finished.load(Ordering::Acquire)
    }
}

struct Inner {
    cfg: RuntimeConfig,
    clock: RunClock,
    engine: RetrievalEngine,
    memory: MemoryAccountant,
    record_tx: Sender<Record>,
    workers: [Sender<WorkerMsg>; 3],
    sched_tx: Option<Sender<SchedMsg>>,
    decisions: Mutex<Vec<DecisionRecord>>,
    active: Mutex<Vec<Arc<ReqCtx>>>,
    slots: Mutex<usize>,
    slot_cv: Condvar,
    a_pending: AtomicUsize,
    stopped: AtomicBool,
}

/// Threaded runtime: one worker thread per stage (L, A, E) shared by all
/// requests, the retrieval engine's readers, a scheduler thread, and one
/// driver thread per request. Stage costs are slept, scaled by
/// `time_scale`; timestamps are model µs on one monotonic clock.
pub struct Runtime {
    inner: Arc<Inner>,
    recorder: Recorder,
    threads: Vec<JoinHandle<()>>,
}

/// Completion handle of a submitted request.
pub struct RequestHandle {
    ctx: Arc<ReqCtx>,
}

impl RequestHandle {
    pub fn request_id(&self) -> u64 {
        self.ctx.id()
    }

    /// Model-µs timestamp at which the runtime accepted the request.
    pub fn arrival_ts(&self) -> u64 {
        self.ctx.request.arrival_ts
    }

    pub fn is_finished(&self) -> bool {
        self.ctx.finished()
    }

    /// Blocks until the request finishes.
    pub fn wait(self) -> Result<InferenceResult, PipelineError> {
        let mut outcome = self.ctx.outcome.lock().unwrap();
        while outcome.is_none() {
            outcome = self.ctx.done_cv.wait(outcome).unwrap();
        }
        let end = outcome.take().unwrap()?;
        drop(outcome);
        let ctx = &self.ctx;
        let arrival = ctx.request.arrival_ts;
        let mut events = ctx.events.lock().unwrap().clone();
        events.sort_by_key(|e| (e.start, e.stage, e.layer_index));
        Ok(InferenceResult {
            request_id: ctx.id(),
            output: ctx.activation.lock().unwrap().clone(),
            arrival_ts: arrival,
            admitted_ts: ctx.admitted.lock().unwrap().unwrap_or(arrival),
            latency: end.saturating_sub(arrival),
            layer_wait: ctx.first_l_start.lock().unwrap().unwrap_or(arrival).saturating_sub(arrival),
            events,
            alloc_segments: ctx.allocs.lock().unwrap().clone(),
            fingerprints: ctx.fingerprints.lock().unwrap().clone(),
        })
    }
}

impl Runtime {
    pub fn start(cfg: RuntimeConfig) -> Self {
        let clock = RunClock::start(cfg.time_scale);
        let engine = RetrievalEngine::start(cfg.engine.clone(), clock);
        let recorder = Recorder::new();
        let scheduling = cfg.strategy.enable_priority_scheduler && cfg.scheduler.enabled;
        let notices = scheduling.then(|| engine.subscribe());
        let (sched_tx, sched_rx) = channel();
        let (l_tx, l_rx) = channel();
        let (a_tx, a_rx) = channel();
        let (e_tx, e_rx) = channel();
        let inner = Arc::new(Inner {
            slots: Mutex::new(cfg.max_in_flight.max(1)),
            cfg,
            clock,
            engine,
            memory: MemoryAccountant::new(),
            record_tx: recorder.sink(),
            workers: [l_tx, a_tx, e_tx],
            sched_tx: scheduling.then(|| sched_tx.clone()),
            decisions: Mutex::new(Vec::new()),
            active: Mutex::new(Vec::new()),
            slot_cv: Condvar::new(),
            a_pending: AtomicUsize::new(0),
            stopped: AtomicBool::new(false),
        });
        let mut threads = Vec::new();
        for (name, rx) in [("stage-l", l_rx), ("stage-a", a_rx), ("stage-e", e_rx)] {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name(name.into())
                    .spawn(move || stage_worker(&inner, rx))
                    .expect("spawn stage worker"),
            );
        }
        if let Some(notices) = notices {
            let inner_s = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("scheduler".into())
                    .spawn(move || scheduler_loop(&inner_s, sched_rx))
                    .expect("spawn scheduler"),
            );
            let inner_f = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("notice-forwarder".into())
                    .spawn(move || forward_notices(&inner_f, notices, sched_tx))
                    .expect("spawn forwarder"),
            );
        }
        Self { inner, recorder, threads }
    }

    pub fn clock(&self) -> RunClock {
        self.inner.clock
    }

    pub fn now_us(&self) -> u64 {
        self.inner.clock.now_us()
    }

    pub fn memory(&self) -> &MemoryAccountant {
        &self.inner.memory
    }

    /// Samples of the memory trace at the given cadence (model µs).
    pub fn memory_samples(&self, cadence_us: u64) -> Vec<MemorySample> {
        self.inner.memory.trace().samples(cadence_us)
    }

    pub fn peak_payload(&self, bucket: MemBucket) -> u64 {
        self.inner.memory.peak_payload(bucket)
    }

    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.inner.decisions.lock().unwrap().clone()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.inner.engine.transitions()
    }

    /// Everything recorded so far, with the wall clock in the header.
    pub fn event_log(&self, mut header: RunHeader) -> EventLog {
        header.wall_clock.get_or_insert_with(unix_seconds);
        header.time_scale = self.inner.cfg.time_scale;
        let mut log = EventLog::new(header);
        self.recorder.drain_into(&mut log);
        log.sort();
        log
    }

    /// Admits `request` now (its `arrival_ts` is overwritten with the
    /// current clock) and returns a handle to its result. Request ids must
    /// be unique among in-flight requests.
    pub fn submit(&self, mut request: InferenceRequest) -> RequestHandle {
        request.arrival_ts = self.inner.clock.now_us();
        let n = request.model.layer_count();
        let ctx = Arc::new(ReqCtx {
            tracker: DependencyTracker::new(n),
            blocks: Mutex::new((0..n).map(|_| None).collect()),
            shards: Mutex::new((0..n).map(|_| None).collect()),
            tasks: Mutex::new(vec![None; n]),
            activation: Mutex::new(request.input.clone()),
            events: Mutex::new(Vec::new()),
            allocs: Mutex::new(Vec::new()),
            fingerprints: Mutex::new(vec![[0; 4]; n]),
            first_l_start: Mutex::new(None),
            admitted: Mutex::new(None),
            outcome: Mutex::new(None),
            done_cv: Condvar::new(),
            finished: AtomicBool::new(false),
            request,
        });
        let inner = Arc::clone(&self.inner);
        let driver_ctx = Arc::clone(&ctx);
        std::thread::Builder::new()
            .name(format!("request-{}", ctx.id()))
            .spawn(move || drive_request(&inner, driver_ctx))
            .expect("spawn request driver");
        RequestHandle { ctx }
    }

    /// Convenience: submit and wait.
    pub fn run_request(&self, request: InferenceRequest) -> Result<InferenceResult, PipelineError> {
        self.submit(request).wait()
    }

    pub fn shutdown(&mut self) {
        if self.inner.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        for w in &self.inner.workers {
            let _ = w.send(WorkerMsg::Stop);
        }
        if let Some(tx) = &self.inner.sched_tx {
            let _ = tx.send(SchedMsg::Stop);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let active: Vec<Arc<ReqCtx>> = self.inner.active.lock().unwrap().clone();
        for ctx in active {
            let id = ctx.id();
            fail(&self.inner, &ctx, PipelineError::Stopped(id));
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

// ---- request lifecycle -----------------------------------------------------

fn drive_request(inner: &Arc<Inner>, ctx: Arc<ReqCtx>) {
    {
        let mut free = inner.slots.lock().unwrap();
        while *free == 0 {
            if inner.stopped.load(Ordering::Acquire) {
                drop(free);
                fail(inner, &ctx, PipelineError::Stopped(ctx.id()));
                return;
            }
            free = inner.slot_cv.wait_timeout(free, POLL).unwrap().0;
        }
        *free -= 1;
    }
    let now = inner.clock.now_us();
    *ctx.admitted.lock().unwrap() = Some(now);
    inner.active.lock().unwrap().push(Arc::clone(&ctx));
    let id = ctx.id();
    sched(inner, SchedMsg::Arrival(id, now));
    if let Err(e) = ctx.request.validate() {
        fail(inner, &ctx, e);
        return;
    }
    let n = ctx.tracker.len();
    for layer in 0..n {
        send_job(inner, &ctx, layer, Kind::Construct);
    }
    if !inner.cfg.strategy.enable_decoupler {
        return;
    }
    for layer in 0..n {
        if let Err(e) = issue(inner, &ctx, layer) {
            fail(inner, &ctx, e);
            return;
        }
    }
    let mut retrieved = 0;
    while retrieved < n && !ctx.finished() && !inner.stopped.load(Ordering::Acquire) {
        if let Some(c) = inner.engine.wait_ready(id, POLL) {
            retrieved += 1;
            if let Err(e) = retrieval_done(inner, &ctx, c) {
                fail(inner, &ctx, e);
            }
        }
    }
}

fn issue(inner: &Inner, ctx: &ReqCtx, layer: usize) -> Result<TaskId, PipelineError> {
    let spec = &ctx.request.model.layers[layer];
    let path =
        ctx.request.weights.file_path(spec.layer_index).ok_or(PipelineError::MissingWeights(spec.layer_index))?;
    let cost = spec.retrieval_cost;
    let task = inner.engine.enqueue_timed(ctx.id(), spec.layer_index, path, cost, Some(cost))?;
    ctx.tasks.lock().unwrap()[layer] = Some(task);
    sched(inner, SchedMsg::Issue { request_id: ctx.id(), layer: spec.layer_index, task, estimate: cost });
    Ok(task)
}

fn retrieval_done(inner: &Inner, ctx: &Arc<ReqCtx>, c: Completion) -> Result<(), PipelineError> {
    let layer = c.layer_index as usize;
    let signal = c.result.map_err(|source| PipelineError::Retrieval { layer: c.layer_index, source })?;
    record(inner, ctx, Stage::R, layer, signal.started_at, signal.completed_at);
    inner.memory.charge_shard(inner.clock.now_us(), ctx.id(), c.layer_index, signal.shard.encoded_len() as u64);
    ctx.shards.lock().unwrap()[layer] = Some(signal.shard);
    ctx.tracker.mark_retrieved(layer);
    if inner.cfg.strategy.enable_decoupler {
        dispatch_apply(inner, ctx, layer);
    }
    Ok(())
}

fn sched(inner: &Inner, msg: SchedMsg) {
    if let Some(tx) = &inner.sched_tx {
        let _ = tx.send(msg);
    }
}

fn send_job(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize, kind: Kind) {
    let unit = match kind {
        Kind::Construct => 0,
        Kind::Apply | Kind::Load => 1,
        Kind::Execute => 2,
    };
    if unit == 1 {
        inner.a_pending.fetch_add(1, Ordering::AcqRel);
    }
    let _ = inner.workers[unit].send(WorkerMsg::Job(Arc::clone(ctx), layer, kind));
}

fn dispatch_apply(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) {
    if layer < ctx.tracker.len() && ctx.tracker.claim_apply(layer) {
        send_job(inner, ctx, layer, Kind::Apply);
    }
}

fn dispatch_load(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) {
    if layer < ctx.tracker.len() && ctx.tracker.claim_load(layer) {
        send_job(inner, ctx, layer, Kind::Load);
    }
}

fn dispatch_execute(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) {
    if layer < ctx.tracker.len() && ctx.tracker.claim_execute(layer) {
        send_job(inner, ctx, layer, Kind::Execute);
    }
}

fn record(inner: &Inner, ctx: &ReqCtx, stage: Stage, layer: usize, start: u64, end: u64) {
    let e = StageInterval { request_id: ctx.id(), stage, layer_index: layer as u32, start, end };
    ctx.events.lock().unwrap().push(e);
    let _ = inner.record_tx.send(Record::Stage(e));
}

fn release_slot(inner: &Inner, ctx: &ReqCtx) {
    let mut active = inner.active.lock().unwrap();
    let before = active.len();
    active.retain(|c| c.id() != ctx.id());
    if active.len() < before {
        *inner.slots.lock().unwrap() += 1;
        inner.slot_cv.notify_all();
    }
}

fn finish_with(inner: &Inner, ctx: &ReqCtx, outcome: Result<u64, PipelineError>) {
    {
        let mut slot = ctx.outcome.lock().unwrap();
        if ctx.finished.swap(true, Ordering::AcqRel) {
            return;
        }
        *slot = Some(outcome);
    }
    inner.memory.release_request(inner.clock.now_us(), ctx.id());
    sched(inner, SchedMsg::Forget(ctx.id()));
    release_slot(inner, ctx);
    ctx.done_cv.notify_all();
}

fn fail(inner: &Inner, ctx: &ReqCtx, error: PipelineError) {
    if ctx.finished() {
        return;
    }
    let tasks: Vec<TaskId> = ctx.tasks.lock().unwrap().iter().flatten().copied().collect();
    for t in tasks {
        if inner.engine.task(t).is_some_and(|t| !t.state.is_terminal()) {
            sched(inner, SchedMsg::Retire(t));
            let _ = inner.engine.suspend(t);
        }
    }
    finish_with(inner, ctx, Err(error));
}

// ---- stage workers -----------------------------------------------------------

fn stage_worker(inner: &Arc<Inner>, rx: Receiver<WorkerMsg>) {
    while let Ok(WorkerMsg::Job(ctx, layer, kind)) = rx.recv() {
        if !ctx.finished() {
            let result = match kind {
                Kind::Construct => construct(inner, &ctx, layer),
                Kind::Apply => apply(inner, &ctx, layer),
                Kind::Load => load(inner, &ctx, layer).and_then(|()| apply(inner, &ctx, layer)),
                Kind::Execute => execute(inner, &ctx, layer),
            };
            if let Err(e) = result {
                fail(inner, &ctx, e);
            }
        }
        if matches!(kind, Kind::Apply | Kind::Load) {
            inner.a_pending.fetch_sub(1, Ordering::AcqRel);
        }
    }
}

fn construct(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) -> Result<(), PipelineError> {
    let spec = &ctx.request.model.layers[layer];
    let clock = inner.clock;
    let start = clock.now_us();
    ctx.first_l_start.lock().unwrap().get_or_insert(start);
    sched(inner, SchedMsg::ConstructionStart(ctx.id(), spec.layer_index, start));
    let reg = register_parameters::<f32>(
        spec,
        inner.cfg.strategy.registration_mode(),
        ctx.request.init_seed,
        inner.cfg.skip_factor,
    )?;
    clock.sleep_until(start + spec.instantiate_cost + reg.timing.bookkeeping);
    let end = clock.now_us();
    record(inner, ctx, Stage::L, layer, start, end);
    let payload = reg.block.payload_bytes();
    ctx.blocks.lock().unwrap()[layer] = Some(reg.block);
    inner.memory.charge_block(end, ctx.id(), spec.layer_index, MemBucket::Placeholders, payload, BLOCK_HEADER_BYTES);
    if reg.timing.materialize > 0 {
        clock.sleep_until(end + reg.timing.materialize);
        let seg = AllocSegment { request_id: ctx.id(), layer_index: spec.layer_index, start: end, end: clock.now_us() };
        ctx.allocs.lock().unwrap().push(seg);
        let _ = inner.record_tx.send(Record::Alloc(seg));
    }
    ctx.tracker.mark_constructed(layer);
    if inner.cfg.strategy.enable_decoupler {
        dispatch_apply(inner, ctx, layer);
    } else {
        dispatch_load(inner, ctx, layer);
    }
    Ok(())
}

fn load(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) -> Result<(), PipelineError> {
    issue(inner, ctx, layer)?;
    loop {
        if ctx.finished() || inner.stopped.load(Ordering::Acquire) {
            return Err(PipelineError::Stopped(ctx.id()));
        }
        if let Some(c) = inner.engine.wait_ready(ctx.id(), POLL) {
            return retrieval_done(inner, ctx, c);
        }
    }
}

fn apply(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) -> Result<(), PipelineError> {
    let spec = &ctx.request.model.layers[layer];
    let clock = inner.clock;
    let start = clock.now_us();
    let shard = ctx.shards.lock().unwrap()[layer]
        .take()
        .ok_or_else(|| PipelineError::InvariantViolation(format!("layer {layer} applied without weights")))?;
    let block = ctx.blocks.lock().unwrap()[layer]
        .take()
        .ok_or_else(|| PipelineError::InvariantViolation(format!("layer {layer} applied before construction")))?;
    let block = restore_and_apply(block, &shard)?;
    clock.sleep_until(start + spec.apply_cost);
    let end = clock.now_us();
    let mut fp = [0u8; 4];
    let n = shard.payload.len().min(4);
    fp[..n].copy_from_slice(&shard.payload[..n]);
    ctx.fingerprints.lock().unwrap()[layer] = fp;
    inner.memory.charge_block(
        end,
        ctx.id(),
        spec.layer_index,
        MemBucket::FullParams,
        block.payload_bytes(),
        BLOCK_HEADER_BYTES,
    );
    ctx.blocks.lock().unwrap()[layer] = Some(block);
    record(inner, ctx, Stage::A, layer, start, end);
    ctx.tracker.mark_applied(layer)?;
    dispatch_execute(inner, ctx, layer);
    if inner.cfg.strategy.enable_decoupler {
        dispatch_apply(inner, ctx, layer + 1);
    } else {
        dispatch_load(inner, ctx, layer + 1);
    }
    Ok(())
}

fn execute(inner: &Inner, ctx: &Arc<ReqCtx>, layer: usize) -> Result<(), PipelineError> {
    let spec = &ctx.request.model.layers[layer];
    let clock = inner.clock;
    let start = clock.now_us();
    {
        let blocks = ctx.blocks.lock().unwrap();
        let block = blocks[layer]
            .as_ref()
            .ok_or_else(|| PipelineError::InvariantViolation(format!("layer {layer} executed without parameters")))?;
        let mut act = ctx.activation.lock().unwrap();
        *act = forward_affine(block, &act, spec)?;
    }
    clock.sleep_until(start + spec.compute_cost);
    let end = clock.now_us();
    record(inner, ctx, Stage::E, layer, start, end);
    ctx.tracker.mark_executed(layer)?;
    if inner.cfg.strategy.enable_decoupler {
        ctx.blocks.lock().unwrap()[layer] = None;
        release_layer_buffers(&inner.memory, end, ctx.id(), spec.layer_index);
    }
    if ctx.tracker.all_executed() {
        finish_with(inner, ctx, Ok(end));
    } else {
        dispatch_execute(inner, ctx, layer + 1);
    }
    Ok(())
}

// ---- scheduler thread ------------------------------------------------------------

fn forward_notices(inner: &Inner, notices: Receiver<EngineNotice>, tx: Sender<SchedMsg>) {
    while !inner.stopped.load(Ordering::Acquire) {
        match notices.recv_timeout(POLL) {
            Ok(n) => {
                if tx.send(SchedMsg::Notice(n)).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

fn scheduler_loop(inner: &Inner, rx: Receiver<SchedMsg>) {
    let cfg = &inner.cfg.scheduler;
    let mut s = Scheduler::new(cfg.clone());
    let tick = Duration::from_secs_f64((cfg.tick_us.max(1) as f64 * inner.cfg.time_scale / 1e6).max(1e-5));
    let mut next_tick = Instant::now() + tick;
    // engine notices can overtake the driver's issue message
    let mut early_start: HashMap<TaskId, u64> = HashMap::new();
    let mut early_done: HashSet<TaskId> = HashSet::new();
    let mut logged = 0;
    loop {
        match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
            Ok(SchedMsg::Stop) | Err(RecvTimeoutError::Disconnected) => return,
            Ok(SchedMsg::Arrival(id, ts)) => s.on_arrival(id, ts),
            Ok(SchedMsg::ConstructionStart(id, layer, ts)) => s.on_construction_start(id, layer, ts),
            Ok(SchedMsg::Issue { request_id, layer, task, estimate }) => {
                if early_done.remove(&task) {
                    early_start.remove(&task);
                } else {
                    s.on_issue(request_id, layer, task, estimate);
                    if let Some(ts) = early_start.remove(&task) {
                        s.on_retrieval_start(task, ts);
                    }
                }
            }
            Ok(SchedMsg::Notice(EngineNotice::Started { task, ts, .. })) => {
                if s.record_for_task(task) {
                    s.on_retrieval_start(task, ts);
                } else {
                    early_start.insert(task, ts);
                }
            }
            Ok(SchedMsg::Notice(EngineNotice::Finished { task, ts, .. })) => {
                if s.record_for_task(task) {
                    for t in s.on_retrieval_done(task, ts) {
                        let _ = inner.engine.resume(t);
                    }
                } else {
                    early_done.insert(task);
                }
            }
            Ok(SchedMsg::Retire(task)) => {
                for t in s.on_retrieval_done(task, inner.clock.now_us()) {
                    let _ = inner.engine.resume(t);
                }
            }
            Ok(SchedMsg::Forget(id)) => s.forget_request(id),
            Err(RecvTimeoutError::Timeout) => {
                let now = inner.clock.now_us();
                for d in s.tick(now) {
                    if let Decision::Boosted { task, suspend, .. } = d {
                        let _ = inner.engine.set_priority(task, Priority::High);
                        for t in suspend {
                            let _ = inner.engine.suspend(t);
                        }
                    }
                }
                if inner.a_pending.load(Ordering::Acquire) == 0 {
                    let active: Vec<Arc<ReqCtx>> = inner.active.lock().unwrap().clone();
                    for ctx in active {
                        let next = ctx.tracker.applied_count();
                        if next < ctx.tracker.len() && ctx.tracker.stalled_on_retrieval(next) {
                            if let Some(task) = s.stall_boost(ctx.id(), next as u32, now) {
                                let _ = inner.engine.set_priority(task, Priority::High);
                            }
                        }
                    }
                }
                next_tick = Instant::now() + tick;
            }
        }
        let log = s.decision_log();
        if log.len() > logged {
            inner.decisions.lock().unwrap().extend_from_slice(&log[logged..]);
            logged = log.len();
        }
    }
}
