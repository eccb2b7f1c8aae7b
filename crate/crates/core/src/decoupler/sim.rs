use std::collections::HashMap;
use std::path::PathBuf;

use super::{
    finish_read, Completion, DiskDelay, EngineError, EngineNotice, Priority, RetrievalError, TaskId, TaskState,
    TaskTable,
};

const EPS: f64 = 1e-6;

/// Retrieval engine on a virtual clock. Each task needs a fixed amount of
/// exclusive disk time; running tasks share the disk equally, so `k` running
/// tasks each progress at rate `1/k`. File bytes are read and verified when a
/// task completes.
#[derive(Debug)]
pub struct SimRetrievalEngine {
    table: TaskTable,
    remaining: HashMap<TaskId, f64>,
    now: u64,
    delay: DiskDelay,
    notices: Vec<EngineNotice>,
    completions: Vec<Completion>,
}

impl SimRetrievalEngine {
    pub fn new(max_parallel_reads: usize, delay: DiskDelay) -> Self {
        Self {
            table: TaskTable::new(max_parallel_reads),
            remaining: HashMap::new(),
            now: 0,
            delay,
            notices: Vec::new(),
            completions: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn table(&self) -> &TaskTable {
        &self.table
    }

    /// Issues a read whose disk time is `work_us` plus the configured extra
    /// delay for the layer.
    pub fn enqueue(
        &mut self,
        request_id: u64,
        layer_index: u32,
        path: PathBuf,
        expected_duration: u64,
        work_us: u64,
        now: u64,
    ) -> TaskId {
        self.advance_to(now);
        let id = self.table.insert(request_id, layer_index, path, expected_duration, self.now);
        let work = work_us + self.delay.extra_for(layer_index);
        self.remaining.insert(id, work as f64);
        self.reschedule();
        id
    }

    pub fn suspend(&mut self, id: TaskId, now: u64) -> Result<TaskState, EngineError> {
        self.advance_to(now);
        self.table.hold(id)?;
        self.reschedule();
        Ok(self.table.get(id).unwrap().state)
    }

    pub fn resume(&mut self, id: TaskId, now: u64) -> Result<TaskState, EngineError> {
        self.advance_to(now);
        self.table.release(id)?;
        self.reschedule();
        Ok(self.table.get(id).unwrap().state)
    }

    pub fn set_priority(&mut self, id: TaskId, priority: Priority, now: u64) -> Result<TaskState, EngineError> {
        self.advance_to(now);
        self.table.set_priority(id, priority)?;
        self.reschedule();
        Ok(self.table.get(id).unwrap().state)
    }

    /// Time of the next completion if nothing else changes.
    pub fn next_event_time(&self) -> Option<u64> {
        let running = self.table.running();
        let k = running.len() as f64;
        running
            .iter()
            .map(|id| self.remaining[id])
            .min_by(f64::total_cmp)
            .map(|r| self.now + (r * k - EPS).max(0.0).ceil() as u64)
    }

    /// Runs the disk forward to `t`, completing every task that finishes on
    /// the way (including at `t` itself).
    pub fn advance_to(&mut self, t: u64) {
        while let Some(finish_at) = self.next_event_time() {
            if finish_at > t.max(self.now) {
                break;
            }
            let running = self.table.running();
            self.progress(&running, finish_at - self.now);
            self.now = finish_at;
            for id in running {
                if self.remaining[&id] <= EPS {
                    self.complete(id);
                }
            }
            self.reschedule();
        }
        if t > self.now {
            let running = self.table.running();
            self.progress(&running, t - self.now);
            self.now = t;
        }
    }

    pub fn drain_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completions)
    }

    pub fn drain_notices(&mut self) -> Vec<EngineNotice> {
        std::mem::take(&mut self.notices)
    }

    fn progress(&mut self, running: &[TaskId], dt: u64) {
        if running.is_empty() || dt == 0 {
            return;
        }
        let step = dt as f64 / running.len() as f64;
        for id in running {
            *self.remaining.get_mut(id).unwrap() -= step;
        }
    }

    fn reschedule(&mut self) {
        loop {
            let started = self.table.reschedule(self.now);
            if started.is_empty() {
                return;
            }
            let mut failed_any = false;
            for id in started {
                let task = self.table.get(id).unwrap();
                self.notices.push(EngineNotice::Started {
                    task: id,
                    request_id: task.request_id,
                    layer_index: task.layer_index,
                    ts: self.now,
                });
                if !task.path.is_file() {
                    let err = RetrievalError::NotFound(task.path.clone());
                    self.fail(id, err);
                    failed_any = true;
                }
            }
            if !failed_any {
                return;
            }
        }
    }

    fn fail(&mut self, id: TaskId, err: RetrievalError) {
        self.table.finish(id, false, self.now);
        self.remaining.remove(&id);
        let task = self.table.get(id).unwrap();
        self.notices.push(EngineNotice::Finished {
            task: id,
            request_id: task.request_id,
            layer_index: task.layer_index,
            ts: self.now,
            ok: false,
        });
        self.completions.push(Completion {
            request_id: task.request_id,
            layer_index: task.layer_index,
            task_id: id,
            result: Err(err),
        });
    }

    fn complete(&mut self, id: TaskId) {
        let task = self.table.get(id).unwrap().clone();
        let result = std::fs::read(&task.path)
            .map_err(|e| RetrievalError::Io { path: task.path.clone(), message: e.to_string() })
            .and_then(|bytes| {
                self.table.add_bytes(id, bytes.len() as u64);
                finish_read(&task, &bytes, task.started_at.unwrap_or(self.now), self.now)
            });
        match result {
            Ok(signal) => {
                self.table.finish(id, true, self.now);
                self.remaining.remove(&id);
                self.notices.push(EngineNotice::Finished {
                    task: id,
                    request_id: task.request_id,
                    layer_index: task.layer_index,
                    ts: self.now,
                    ok: true,
                });
                self.completions.push(Completion {
                    request_id: task.request_id,
                    layer_index: task.layer_index,
                    task_id: id,
                    result: Ok(signal),
                });
            }
            Err(e) => self.fail(id, e),
        }
    }
}
