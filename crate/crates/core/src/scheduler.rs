//! Deadline-checked retrieval priorities.
//!
//! Each in-flight retrieval R_i gets an expected completion time
//! `(t0 + a) + D`, where `t0` is the start of the most recent layer
//! construction of the same request when R_i started, `a` the measured delay
//! from there to R_i's start and `D` the expected retrieval duration. Once the
//! clock passes that deadline with R_i unfinished, R_i is raised to High and
//! every other in-flight, non-boosted retrieval is held until R_i finishes.
//! Held retrievals are not deadline-checked while the hold lasts.
//!
//! The scheduler only decides; callers apply the returned suspend/resume and
//! priority actions to whichever engine they drive.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::decoupler::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    /// D is the per-layer static estimate supplied at issue.
    Static,
    /// D is the static estimate scaled by an EWMA of observed/estimated ratios.
    Ewma { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub enabled: bool,
    /// Polling period of the deadline check, model µs.
    pub tick_us: u64,
    pub estimator: Estimator,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { enabled: true, tick_us: 1_000, estimator: Estimator::Static }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("no retrieval record for request {request_id} layer {layer_index}")]
    NoSuchRecord { request_id: u64, layer_index: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Unchanged,
    Boosted {
        request_id: u64,
        layer_index: u32,
        task: TaskId,
        /// Every task held on behalf of this boost.
        held: BTreeSet<TaskId>,
        /// Tasks that must be suspended now (first hold on them).
        suspend: Vec<TaskId>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Boost,
    StallBoost,
    Resume,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub now: u64,
    pub request_id: u64,
    pub layer_index: u32,
    pub action: Action,
    pub suspended_set: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRecord {
    pub task: TaskId,
    pub expected_duration: u64,
    pub t0: Option<u64>,
    pub a: Option<u64>,
    pub boosted: bool,
    pub stall_boosted: bool,
    held: BTreeSet<TaskId>,
}

impl RetrievalRecord {
    /// `(t0 + a) + D`, known once the retrieval has started.
    pub fn deadline(&self) -> Option<u64> {
        Some(self.t0? + self.a? + self.expected_duration)
    }
}

type Key = (u64, u32);

#[derive(Debug)]
pub struct Scheduler {
    config: SchedulerConfig,
    records: BTreeMap<Key, RetrievalRecord>,
    by_task: HashMap<TaskId, Key>,
    /// How many active boosts hold each task.
    hold_count: HashMap<TaskId, usize>,
    last_l_start: HashMap<u64, u64>,
    arrival: HashMap<u64, u64>,
    ewma_ratio: f64,
    log: Vec<DecisionRecord>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            records: BTreeMap::new(),
            by_task: HashMap::new(),
            hold_count: HashMap::new(),
            last_l_start: HashMap::new(),
            arrival: HashMap::new(),
            ewma_ratio: 1.0,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn on_arrival(&mut self, request_id: u64, ts: u64) {
        self.arrival.insert(request_id, ts);
    }

    pub fn on_construction_start(&mut self, request_id: u64, _layer_index: u32, ts: u64) {
        self.last_l_start.insert(request_id, ts);
    }

    /// Registers a retrieval at issue time. `static_estimate` is the layer's
    /// expected I/O duration before any estimator adjustment.
    pub fn on_issue(&mut self, request_id: u64, layer_index: u32, task: TaskId, static_estimate: u64) {
        let expected_duration = match self.config.estimator {
            Estimator::Static => static_estimate,
            Estimator::Ewma { .. } => (static_estimate as f64 * self.ewma_ratio).round() as u64,
        }
        .max(1);
        self.records.insert(
            (request_id, layer_index),
            RetrievalRecord {
                task,
                expected_duration,
                t0: None,
                a: None,
                boosted: false,
                stall_boosted: false,
                held: BTreeSet::new(),
            },
        );
        self.by_task.insert(task, (request_id, layer_index));
    }

    /// Fixes `t0` and `a` when the engine first runs the task.
    pub fn on_retrieval_start(&mut self, task: TaskId, ts: u64) {
        let Some(&key) = self.by_task.get(&task) else {
            return;
        };
        let t0 = self.last_l_start.get(&key.0).or_else(|| self.arrival.get(&key.0)).copied().unwrap_or(ts).min(ts);
        if let Some(r) = self.records.get_mut(&key) {
            r.t0 = Some(t0);
            r.a = Some(ts - t0);
        }
    }

    pub fn record(&self, request_id: u64, layer_index: u32) -> Option<&RetrievalRecord> {
        self.records.get(&(request_id, layer_index))
    }

    pub fn record_for_task(&self, task: TaskId) -> bool {
        self.by_task.contains_key(&task)
    }

    pub fn in_flight(&self) -> usize {
        self.records.len()
    }

    pub fn decision_log(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn held_count(&self) -> usize {
        self.hold_count.len()
    }

    /// One deadline check for layer `layer_index` of `request_id`.
    pub fn check_and_adjust(
        &mut self,
        request_id: u64,
        layer_index: u32,
        now: u64,
    ) -> Result<Decision, SchedulerError> {
        let key = (request_id, layer_index);
        let record = self.records.get(&key).ok_or(SchedulerError::NoSuchRecord { request_id, layer_index })?;
        // a held task is late because an active boost suspended it
        if !self.config.enabled || record.boosted || self.hold_count.contains_key(&record.task) {
            return Ok(Decision::Unchanged);
        }
        match record.deadline() {
            Some(deadline) if now >= deadline => Ok(self.boost(key, now, Action::Boost)),
            _ => Ok(Decision::Unchanged),
        }
    }

    /// Checks every in-flight record, lowest layer index first.
    pub fn tick(&mut self, now: u64) -> Vec<Decision> {
        let mut keys: Vec<Key> = self.records.keys().copied().collect();
        keys.sort_by_key(|&(req, layer)| (layer, req));
        keys.into_iter()
            .filter_map(|(req, layer)| match self.check_and_adjust(req, layer, now) {
                Ok(Decision::Unchanged) | Err(_) => None,
                Ok(d) => Some(d),
            })
            .collect()
    }

    /// Raises R_i to High because the apply worker is idle waiting only for
    /// it. Returns the task to boost, at most once per record.
    pub fn stall_boost(&mut self, request_id: u64, layer_index: u32, now: u64) -> Option<TaskId> {
        if !self.config.enabled {
            return None;
        }
        let r = self.records.get_mut(&(request_id, layer_index))?;
        if r.boosted || r.stall_boosted {
            return None;
        }
        r.stall_boosted = true;
        let task = r.task;
        self.log.push(DecisionRecord {
            now,
            request_id,
            layer_index,
            action: Action::StallBoost,
            suspended_set: Vec::new(),
        });
        Some(task)
    }

    fn boost(&mut self, key: Key, now: u64, action: Action) -> Decision {
        let task = self.records[&key].task;
        let held: BTreeSet<TaskId> =
            self.records.iter().filter(|(k, r)| **k != key && !r.boosted).map(|(_, r)| r.task).collect();
        let mut suspend = Vec::new();
        for &t in &held {
            let c = self.hold_count.entry(t).or_insert(0);
            *c += 1;
            if *c == 1 {
                suspend.push(t);
            }
        }
        let r = self.records.get_mut(&key).unwrap();
        r.boosted = true;
        r.held = held.clone();
        self.log.push(DecisionRecord {
            now,
            request_id: key.0,
            layer_index: key.1,
            action,
            suspended_set: held.iter().copied().collect(),
        });
        Decision::Boosted { request_id: key.0, layer_index: key.1, task, held, suspend }
    }

    /// Returns true when `task` is no longer held by anyone.
    fn unhold(&mut self, task: TaskId) -> bool {
        match self.hold_count.get_mut(&task) {
            Some(c) if *c > 1 => {
                *c -= 1;
                false
            }
            Some(_) => {
                self.hold_count.remove(&task);
                true
            }
            None => false,
        }
    }

    /// Retires the record of a finished (or failed) retrieval. Returns the
    /// tasks whose last hold this released; each is returned exactly once.
    pub fn on_retrieval_done(&mut self, task: TaskId, now: u64) -> Vec<TaskId> {
        let Some(key) = self.by_task.remove(&task) else {
            return Vec::new();
        };
        let Some(record) = self.records.remove(&key) else {
            return Vec::new();
        };
        if let (Estimator::Ewma { alpha }, Some(t0), Some(a)) = (self.config.estimator, record.t0, record.a) {
            let observed = now.saturating_sub(t0 + a) as f64;
            let ratio = observed / record.expected_duration as f64 * self.ewma_ratio;
            self.ewma_ratio = (1.0 - alpha) * self.ewma_ratio + alpha * ratio;
        }
        // a finished task no longer needs releasing by others
        for r in self.records.values_mut() {
            r.held.remove(&task);
        }
        self.hold_count.remove(&task);
        let mut resumed = Vec::new();
        for t in record.held {
            if self.unhold(t) {
                resumed.push(t);
            }
        }
        if !resumed.is_empty() {
            self.log.push(DecisionRecord {
                now,
                request_id: key.0,
                layer_index: key.1,
                action: Action::Resume,
                suspended_set: resumed.clone(),
            });
        }
        resumed
    }

    pub fn forget_request(&mut self, request_id: u64) {
        self.last_l_start.remove(&request_id);
        self.arrival.remove(&request_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: u32) -> Scheduler {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.on_arrival(0, 0);
        s.on_construction_start(0, 0, 0);
        for l in 1..=n {
            s.on_issue(0, l, TaskId(l as u64), 100);
            s.on_retrieval_start(TaskId(l as u64), 5);
        }
        s
    }

    #[test]
    fn before_deadline_is_unchanged() {
        let mut s = setup(3);
        assert_eq!(s.check_and_adjust(0, 1, 104).unwrap(), Decision::Unchanged);
    }

    #[test]
    fn at_deadline_boosts_and_holds_others() {
        let mut s = setup(3);
        match s.check_and_adjust(0, 1, 105).unwrap() {
            Decision::Boosted { layer_index, task, held, suspend, .. } => {
                assert_eq!(layer_index, 1);
                assert_eq!(task, TaskId(1));
                assert_eq!(held, [TaskId(2), TaskId(3)].into_iter().collect());
                assert_eq!(suspend, vec![TaskId(2), TaskId(3)]);
            }
            d => panic!("{d:?}"),
        }
        assert_eq!(s.on_retrieval_done(TaskId(1), 150), vec![TaskId(2), TaskId(3)]);
        assert_eq!(s.held_count(), 0);
    }

    #[test]
    fn done_task_is_never_boosted() {
        let mut s = setup(3);
        s.on_retrieval_done(TaskId(1), 50);
        assert!(matches!(s.check_and_adjust(0, 1, 105), Err(SchedulerError::NoSuchRecord { .. })));
        assert!(s.tick(105).iter().all(|d| !matches!(d, Decision::Boosted { layer_index: 1, .. })));
    }

    #[test]
    fn done_without_boost_resumes_nothing() {
        let mut s = setup(2);
        assert!(s.on_retrieval_done(TaskId(2), 10).is_empty());
        assert!(s.on_retrieval_done(TaskId(2), 11).is_empty());
    }

    #[test]
    fn held_task_is_not_deadline_boosted() {
        let mut s = setup(3);
        s.check_and_adjust(0, 1, 105).unwrap();
        assert_eq!(s.check_and_adjust(0, 2, 106).unwrap(), Decision::Unchanged);
        assert_eq!(s.on_retrieval_done(TaskId(1), 120), vec![TaskId(2), TaskId(3)]);
        match s.check_and_adjust(0, 2, 121).unwrap() {
            Decision::Boosted { held, suspend, .. } => {
                assert_eq!(held, [TaskId(3)].into_iter().collect());
                assert_eq!(suspend, vec![TaskId(3)]);
            }
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn later_issue_can_boost_over_an_active_hold() {
        let mut s = setup(2);
        s.check_and_adjust(0, 1, 105).unwrap();
        s.on_issue(1, 0, TaskId(9), 10);
        s.on_retrieval_start(TaskId(9), 106);
        match s.check_and_adjust(1, 0, 200).unwrap() {
            Decision::Boosted { held, suspend, .. } => {
                assert_eq!(held, [TaskId(2)].into_iter().collect());
                assert!(suspend.is_empty());
            }
            d => panic!("{d:?}"),
        }
        // task 2 stays held until both boosts finish
        assert!(s.on_retrieval_done(TaskId(1), 210).is_empty());
        assert_eq!(s.on_retrieval_done(TaskId(9), 220), vec![TaskId(2)]);
    }

    #[test]
    fn tick_prefers_lowest_layer() {
        let mut s = setup(3);
        let decisions = s.tick(500);
        assert_eq!(decisions.len(), 1);
        assert!(matches!(decisions[0], Decision::Boosted { layer_index: 1, .. }));
    }

    #[test]
    fn unknown_layer() {
        let mut s = setup(1);
        assert_eq!(s.check_and_adjust(0, 9, 0), Err(SchedulerError::NoSuchRecord { request_id: 0, layer_index: 9 }));
    }

    #[test]
    fn stall_boost_is_deduplicated() {
        let mut s = setup(3);
        assert_eq!(s.stall_boost(0, 3, 10), Some(TaskId(3)));
        assert_eq!(s.stall_boost(0, 3, 11), None);
        assert_eq!(s.stall_boost(0, 3, 12), None);
    }

    #[test]
    fn disabled_scheduler_never_acts() {
        let mut s = Scheduler::new(SchedulerConfig { enabled: false, ..Default::default() });
        s.on_issue(0, 0, TaskId(0), 1);
        s.on_retrieval_start(TaskId(0), 0);
        assert_eq!(s.check_and_adjust(0, 0, 1_000).unwrap(), Decision::Unchanged);
        assert_eq!(s.stall_boost(0, 0, 1_000), None);
    }

    #[test]
    fn ewma_tracks_slow_disks() {
        let mut s = Scheduler::new(SchedulerConfig { estimator: Estimator::Ewma { alpha: 0.5 }, ..Default::default() });
        s.on_arrival(0, 0);
        s.on_issue(0, 0, TaskId(0), 100);
        s.on_retrieval_start(TaskId(0), 0);
        s.on_retrieval_done(TaskId(0), 300);
        s.on_issue(0, 1, TaskId(1), 100);
        assert_eq!(s.record(0, 1).unwrap().expected_duration, 200);
    }
}
