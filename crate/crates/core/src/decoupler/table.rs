use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use super::{EngineError, Priority, TaskId, TaskState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTask {
    pub task_id: TaskId,
    pub request_id: u64,
    pub layer_index: u32,
    pub path: PathBuf,
    pub state: TaskState,
    pub priority: Priority,
    pub issued_at: u64,
    pub started_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub bytes_read: u64,
    /// Expected retrieval duration, µs.
    pub expected_duration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub ts: u64,
    pub task: TaskId,
    pub from: TaskState,
    pub to: TaskState,
}

#[derive(Debug)]
struct Entry {
    task: RetrievalTask,
    held: bool,
}

/// Task bookkeeping and the run policy shared by both engines.
///
/// Eligible tasks are the non-terminal ones nobody holds; they are ordered
/// High before Normal, then by issue order, and the first
/// `max_parallel` of them run. A running task that drops out of that set is
/// suspended; a held queued task simply stays queued.
#[derive(Debug)]
pub struct TaskTable {
    entries: BTreeMap<TaskId, Entry>,
    active: BTreeSet<TaskId>,
    next_id: u64,
    max_parallel: usize,
    log: Vec<Transition>,
}

impl TaskTable {
    pub fn new(max_parallel: usize) -> Self {
        assert!(max_parallel >= 1, "max_parallel_reads must be >= 1");
        Self { entries: BTreeMap::new(), active: BTreeSet::new(), next_id: 0, max_parallel, log: Vec::new() }
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    pub fn insert(
        &mut self,
        request_id: u64,
        layer_index: u32,
        path: PathBuf,
        expected_duration: u64,
        now: u64,
    ) -> TaskId {
        let task_id = TaskId(self.next_id);
        self.next_id += 1;
        let task = RetrievalTask {
            task_id,
            request_id,
            layer_index,
            path,
            state: TaskState::Queued,
            priority: Priority::Normal,
            issued_at: now,
            started_at: None,
            completed_at: None,
            bytes_read: 0,
            expected_duration,
        };
        self.entries.insert(task_id, Entry { task, held: false });
        self.active.insert(task_id);
        task_id
    }

    pub fn get(&self, id: TaskId) -> Option<&RetrievalTask> {
        self.entries.get(&id).map(|e| &e.task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &RetrievalTask> {
        self.entries.values().map(|e| &e.task)
    }

    pub fn is_held(&self, id: TaskId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.held)
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// Keeps `id` from running until [`TaskTable::release`]; a no-op on
    /// terminal tasks. Call [`TaskTable::reschedule`] afterwards.
    pub fn hold(&mut self, id: TaskId) -> Result<TaskState, EngineError> {
        let e = self.entries.get_mut(&id).ok_or(EngineError::NoSuchTask(id))?;
        if !e.task.state.is_terminal() {
            e.held = true;
        }
        Ok(e.task.state)
    }

    pub fn release(&mut self, id: TaskId) -> Result<TaskState, EngineError> {
        let e = self.entries.get_mut(&id).ok_or(EngineError::NoSuchTask(id))?;
        e.held = false;
        Ok(e.task.state)
    }

    pub fn set_priority(&mut self, id: TaskId, priority: Priority) -> Result<TaskState, EngineError> {
        let e = self.entries.get_mut(&id).ok_or(EngineError::NoSuchTask(id))?;
        if !e.task.state.is_terminal() {
            e.task.priority = priority;
        }
        Ok(e.task.state)
    }

    pub fn add_bytes(&mut self, id: TaskId, n: u64) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.task.bytes_read += n;
        }
    }

    fn set_state(&mut self, id: TaskId, to: TaskState, now: u64) {
        let e = self.entries.get_mut(&id).expect("task exists");
        let from = e.task.state;
        assert!(from.can_become(to), "illegal retrieval transition {from:?} -> {to:?} for {id}");
        e.task.state = to;
        self.log.push(Transition { ts: now, task: id, from, to });
    }

    /// Applies the run policy. Returns tasks that started for the first time.
    pub fn reschedule(&mut self, now: u64) -> Vec<TaskId> {
        let mut eligible: Vec<(Reverse<Priority>, TaskId)> = self
            .active
            .iter()
            .filter(|id| !self.entries[id].held)
            .map(|&id| (Reverse(self.entries[&id].task.priority), id))
            .collect();
        eligible.sort_unstable();
        let selected: BTreeSet<TaskId> = eligible.iter().take(self.max_parallel).map(|&(_, id)| id).collect();

        let mut started = Vec::new();
        let active: Vec<TaskId> = self.active.iter().copied().collect();
        for id in active {
            let state = self.entries[&id].task.state;
            match (state, selected.contains(&id)) {
                (TaskState::Queued, true) => {
                    self.set_state(id, TaskState::Running, now);
                    self.entries.get_mut(&id).unwrap().task.started_at = Some(now);
                    started.push(id);
                }
                (TaskState::Suspended, true) => self.set_state(id, TaskState::Running, now),
                (TaskState::Running, false) => self.set_state(id, TaskState::Suspended, now),
                _ => {}
            }
        }
        started
    }

    pub fn running(&self) -> Vec<TaskId> {
        self.active.iter().copied().filter(|id| self.entries[id].task.state == TaskState::Running).collect()
    }

    /// Running → Done or Failed.
    pub fn finish(&mut self, id: TaskId, ok: bool, now: u64) {
        self.set_state(id, if ok { TaskState::Done } else { TaskState::Failed }, now);
        self.entries.get_mut(&id).unwrap().task.completed_at = Some(now);
        self.active.remove(&id);
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.log
    }

    /// Forgets finished tasks of `request_id`.
    pub fn forget_request(&mut self, request_id: u64) {
        self.entries.retain(|id, e| e.task.request_id != request_id || self.active.contains(id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize, max: usize) -> (TaskTable, Vec<TaskId>) {
        let mut t = TaskTable::new(max);
        let ids = (0..n).map(|i| t.insert(0, i as u32, PathBuf::new(), 10, 0)).collect();
        (t, ids)
    }

    #[test]
    fn fifo_when_all_normal() {
        let (mut t, ids) = table(3, 1);
        assert_eq!(t.reschedule(0), vec![ids[0]]);
        t.finish(ids[0], true, 5);
        assert_eq!(t.reschedule(5), vec![ids[1]]);
        t.finish(ids[1], true, 9);
        assert_eq!(t.reschedule(9), vec![ids[2]]);
    }

    #[test]
    fn high_priority_preempts() {
        let (mut t, ids) = table(2, 1);
        t.reschedule(0);
        t.set_priority(ids[1], Priority::High).unwrap();
        assert_eq!(t.reschedule(1), vec![ids[1]]);
        assert_eq!(t.get(ids[0]).unwrap().state, TaskState::Suspended);
        t.finish(ids[1], true, 4);
        t.reschedule(4);
        assert_eq!(t.get(ids[0]).unwrap().state, TaskState::Running);
    }

    #[test]
    fn held_tasks_do_not_run() {
        let (mut t, ids) = table(3, 3);
        t.hold(ids[2]).unwrap();
        t.reschedule(0);
        assert_eq!(t.running(), vec![ids[0], ids[1]]);
        assert_eq!(t.get(ids[2]).unwrap().state, TaskState::Queued);
        t.hold(ids[1]).unwrap();
        t.reschedule(1);
        assert_eq!(t.get(ids[1]).unwrap().state, TaskState::Suspended);
        t.release(ids[1]).unwrap();
        t.release(ids[2]).unwrap();
        t.reschedule(2);
        assert_eq!(t.running().len(), 3);
    }

    #[test]
    fn terminal_tasks_ignore_hold_and_priority() {
        let (mut t, ids) = table(1, 1);
        t.reschedule(0);
        t.finish(ids[0], true, 1);
        assert_eq!(t.hold(ids[0]).unwrap(), TaskState::Done);
        assert_eq!(t.set_priority(ids[0], Priority::High).unwrap(), TaskState::Done);
        assert!(!t.is_held(ids[0]));
        assert_eq!(t.hold(TaskId(99)), Err(EngineError::NoSuchTask(TaskId(99))));
    }
}
