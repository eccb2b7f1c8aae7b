use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{ErrorKind, Read};
use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{
    finish_read, Completion, DiskDelay, EngineError, EngineNotice, Priority, RetrievalError, RetrievalTask, TaskId,
    TaskState, TaskTable, Transition, DEFAULT_CHUNK_BYTES,
};
use crate::clock::RunClock;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub max_parallel_reads: usize,
    pub chunk_bytes: usize,
    /// Simulated disk bandwidth in bytes per model µs, shared by all running
    /// reads. `None` reads as fast as the OS allows.
    pub bandwidth: Option<f64>,
    pub delay: DiskDelay,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { max_parallel_reads: 1, chunk_bytes: DEFAULT_CHUNK_BYTES, bandwidth: None, delay: DiskDelay::None }
    }
}

#[derive(Debug, Default)]
struct IoSlot {
    file: Option<File>,
    buf: Vec<u8>,
    size: u64,
    claimed: bool,
    /// Outcome of a read that ended while the task was suspended; reported
    /// once it runs again.
    failed: Option<RetrievalError>,
    /// Total modelled transfer time of the file, µs; overrides `bandwidth`.
    read_cost: Option<u64>,
}

#[derive(Debug)]
struct State {
    table: TaskTable,
    io: HashMap<TaskId, IoSlot>,
    ready: HashMap<u64, VecDeque<Completion>>,
    listener: Option<Sender<EngineNotice>>,
    stopped: bool,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<State>,
    work: Condvar,
    ready: Condvar,
    clock: RunClock,
    config: EngineConfig,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("retrieval engine state poisoned")
    }

    fn reschedule(&self, st: &mut State) {
        let now = self.clock.now_us();
        for id in st.table.reschedule(now) {
            let t = st.table.get(id).unwrap();
            notify(
                st,
                EngineNotice::Started { task: id, request_id: t.request_id, layer_index: t.layer_index, ts: now },
            );
        }
        self.work.notify_all();
    }

    fn finish(&self, st: &mut State, task: &RetrievalTask, result: Result<super::ReadySignal, RetrievalError>) {
        let now = self.clock.now_us();
        let ok = result.is_ok();
        st.table.finish(task.task_id, ok, now);
        st.io.remove(&task.task_id);
        notify(
            st,
            EngineNotice::Finished {
                task: task.task_id,
                request_id: task.request_id,
                layer_index: task.layer_index,
                ts: now,
                ok,
            },
        );
        st.ready.entry(task.request_id).or_default().push_back(Completion {
            request_id: task.request_id,
            layer_index: task.layer_index,
            task_id: task.task_id,
            result,
        });
        self.ready.notify_all();
        self.reschedule(st);
    }
}

fn notify(st: &mut State, notice: EngineNotice) {
    if let Some(tx) = &st.listener {
        if tx.send(notice).is_err() {
            st.listener = None;
        }
    }
}

/// Background retrieval engine: `max_parallel_reads` worker threads reading
/// shard files chunk by chunk. Every method is safe to call from any thread.
#[derive(Debug)]
pub struct RetrievalEngine {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl RetrievalEngine {
    pub fn start(config: EngineConfig, clock: RunClock) -> Self {
        assert!(config.chunk_bytes > 0, "chunk_bytes must be positive");
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                table: TaskTable::new(config.max_parallel_reads),
                io: HashMap::new(),
                ready: HashMap::new(),
                listener: None,
                stopped: false,
            }),
            work: Condvar::new(),
            ready: Condvar::new(),
            clock,
            config,
        });
        let workers = (0..shared.config.max_parallel_reads)
            .map(|i| {
                let shared = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("retrieval-{i}"))
                    .spawn(move || worker(&shared))
                    .expect("spawn retrieval worker")
            })
            .collect();
        Self { shared, workers }
    }

    pub fn clock(&self) -> RunClock {
        self.shared.clock
    }

    /// Routes start/finish notices to the returned receiver, replacing any
    /// earlier subscriber.
    pub fn subscribe(&self) -> Receiver<EngineNotice> {
        let (tx, rx) = channel();
        self.shared.lock().listener = Some(tx);
        rx
    }

    pub fn enqueue_retrieval(
        &self,
        request_id: u64,
        layer_index: u32,
        path: PathBuf,
        expected_duration: u64,
    ) -> Result<TaskId, EngineError> {
        self.enqueue_timed(request_id, layer_index, path, expected_duration, None)
    }

    /// Like [`RetrievalEngine::enqueue_retrieval`], with the file's modelled
    /// transfer time given directly instead of derived from the bandwidth.
    pub fn enqueue_timed(
        &self,
        request_id: u64,
        layer_index: u32,
        path: PathBuf,
        expected_duration: u64,
        read_cost_us: Option<u64>,
    ) -> Result<TaskId, EngineError> {
        let mut st = self.shared.lock();
        if st.stopped {
            return Err(EngineError::EngineStopped);
        }
        let now = self.shared.clock.now_us();
        let id = st.table.insert(request_id, layer_index, path, expected_duration, now);
        st.io.insert(id, IoSlot { read_cost: read_cost_us, ..IoSlot::default() });
        self.shared.reschedule(&mut st);
        Ok(id)
    }

    /// Holds the task: a running read stops before its next chunk. Terminal
    /// tasks acknowledge without change.
    pub fn suspend(&self, id: TaskId) -> Result<TaskState, EngineError> {
        let mut st = self.shared.lock();
        st.table.hold(id)?;
        self.shared.reschedule(&mut st);
        Ok(st.table.get(id).unwrap().state)
    }

    pub fn resume(&self, id: TaskId) -> Result<TaskState, EngineError> {
        let mut st = self.shared.lock();
        st.table.release(id)?;
        self.shared.reschedule(&mut st);
        Ok(st.table.get(id).unwrap().state)
    }

    pub fn set_priority(&self, id: TaskId, priority: Priority) -> Result<TaskState, EngineError> {
        let mut st = self.shared.lock();
        st.table.set_priority(id, priority)?;
        self.shared.reschedule(&mut st);
        Ok(st.table.get(id).unwrap().state)
    }

    pub fn task(&self, id: TaskId) -> Option<RetrievalTask> {
        self.shared.lock().table.get(id).cloned()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.shared.lock().table.transitions().to_vec()
    }

    /// Next completion of `request_id`, in completion order; never blocks.
    pub fn poll_ready(&self, request_id: u64) -> Option<Completion> {
        self.shared.lock().ready.get_mut(&request_id)?.pop_front()
    }

    pub fn wait_ready(&self, request_id: u64, timeout: Duration) -> Option<Completion> {
        let st = self.shared.lock();
        let (mut st, _) = self
            .shared
            .ready
            .wait_timeout_while(st, timeout, |st| st.ready.get(&request_id).is_none_or(|q| q.is_empty()))
            .expect("retrieval engine state poisoned");
        st.ready.get_mut(&request_id)?.pop_front()
    }

    /// Drops bookkeeping for a finished request.
    pub fn forget_request(&self, request_id: u64) {
        let mut st = self.shared.lock();
        st.ready.remove(&request_id);
        st.table.forget_request(request_id);
    }

    pub fn shutdown(&mut self) {
        self.shared.lock().stopped = true;
        self.shared.work.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for RetrievalEngine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker(shared: &Shared) {
    let mut st = shared.lock();
    loop {
        if st.stopped {
            return;
        }
        let next = st.table.running().into_iter().find(|id| st.io.get(id).is_some_and(|s| !s.claimed));
        let Some(id) = next else {
            st = shared.work.wait(st).expect("retrieval engine state poisoned");
            continue;
        };
        let task = st.table.get(id).unwrap().clone();
        let sharing = st.table.running().len().max(1) as f64;
        let slot = st.io.get_mut(&id).unwrap();
        slot.claimed = true;
        let mut file = slot.file.take();
        let mut buf = std::mem::take(&mut slot.buf);
        let mut size = slot.size;
        let read_cost = slot.read_cost;
        let held = slot.failed.take();
        let step = match held {
            Some(e) => Err(e),
            None if file.is_some() && buf.len() as u64 >= size => Ok(0),
            None => {
                drop(st);
                let step = read_chunk(shared, &task, &mut file, &mut buf, &mut size, read_cost, sharing);
                st = shared.lock();
                step
            }
        };

        if let Ok(n) = step {
            st.table.add_bytes(id, n as u64);
        }
        let running = st.table.get(id).is_some_and(|t| t.state == TaskState::Running);
        let complete = file.is_some() && buf.len() as u64 >= size;
        match step {
            Err(e) if running => shared.finish(&mut st, &task, Err(e)),
            Ok(_) if running && complete => {
                let started = st.table.get(id).and_then(|t| t.started_at).unwrap_or(0);
                let now = shared.clock.now_us();
                let result = finish_read(&task, &buf, started, now);
                shared.finish(&mut st, &task, result);
            }
            step => {
                // still running, or suspended while the chunk was in flight
                let slot = st.io.get_mut(&id).unwrap();
                slot.file = file;
                slot.buf = buf;
                slot.size = size;
                slot.claimed = false;
                slot.failed = step.err();
            }
        }
    }
}

/// Opens the file on first use, reads one chunk and sleeps for its modelled
/// transfer time. Returns the bytes read.
fn read_chunk(
    shared: &Shared,
    task: &RetrievalTask,
    file: &mut Option<File>,
    buf: &mut Vec<u8>,
    size: &mut u64,
    read_cost: Option<u64>,
    sharing: f64,
) -> Result<usize, RetrievalError> {
    let io_err = |e: std::io::Error| RetrievalError::Io { path: task.path.clone(), message: e.to_string() };
    if file.is_none() {
        let f = File::open(&task.path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => RetrievalError::NotFound(task.path.clone()),
            _ => io_err(e),
        })?;
        *size = f.metadata().map_err(io_err)?.len();
        buf.reserve(*size as usize);
        *file = Some(f);
    }
    let f = file.as_mut().unwrap();
    let want = (shared.config.chunk_bytes as u64).min(*size - buf.len() as u64) as usize;
    let start = buf.len();
    buf.resize(start + want, 0);
    f.read_exact(&mut buf[start..]).map_err(io_err)?;

    let share = if *size == 0 { 0.0 } else { want as f64 / *size as f64 };
    let mut model_us = match (read_cost, shared.config.bandwidth) {
        (Some(cost), _) => cost as f64 * share * sharing,
        (None, Some(bw)) => want as f64 / bw * sharing,
        (None, None) => 0.0,
    };
    model_us += shared.config.delay.extra_for(task.layer_index) as f64 * share;
    shared.clock.sleep_us(model_us);
    Ok(want)
}
