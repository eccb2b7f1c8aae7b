use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::PipelineError;

const CONSTRUCTED: u8 = 1;
const RETRIEVED: u8 = 1 << 1;
const APPLIED: u8 = 1 << 2;
const EXECUTED: u8 = 1 << 3;
const APPLY_CLAIMED: u8 = 1 << 4;
const EXECUTE_CLAIMED: u8 = 1 << 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerProgress {
    pub layer_index: u32,
    pub constructed: bool,
    pub retrieved: bool,
    pub applied: bool,
    pub executed: bool,
}

impl LayerProgress {
    fn from_word(layer_index: u32, w: u8) -> Self {
        Self {
            layer_index,
            constructed: w & CONSTRUCTED != 0,
            retrieved: w & RETRIEVED != 0,
            applied: w & APPLIED != 0,
            executed: w & EXECUTED != 0,
        }
    }
}

/// `retrieved(i) ∧ constructed(i) ∧ (i = 0 ∨ applied(i − 1))`.
pub fn can_apply(progress: &[LayerProgress], i: usize) -> bool {
    let p = &progress[i];
    p.retrieved && p.constructed && (i == 0 || progress[i - 1].applied)
}

/// Per-layer flag words updated atomically, with a lock per layer guarding
/// the check-then-claim of stage dispatch.
#[derive(Debug)]
pub struct DependencyTracker {
    words: Vec<AtomicU8>,
    claim: Vec<Mutex<()>>,
    applied: AtomicUsize,
    executed: AtomicUsize,
}

impl DependencyTracker {
    pub fn new(layers: usize) -> Self {
        Self {
            words: (0..layers).map(|_| AtomicU8::new(0)).collect(),
            claim: (0..layers).map(|_| Mutex::new(())).collect(),
            applied: AtomicUsize::new(0),
            executed: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn word(&self, i: usize) -> u8 {
        self.words[i].load(Ordering::Acquire)
    }

    fn has(&self, i: usize, flag: u8) -> bool {
        self.word(i) & flag != 0
    }

    pub fn progress(&self, i: usize) -> LayerProgress {
        LayerProgress::from_word(i as u32, self.word(i))
    }

    pub fn snapshot(&self) -> Vec<LayerProgress> {
        (0..self.len()).map(|i| self.progress(i)).collect()
    }

    /// Number of layers applied so far; A runs in layer order, so this is
    /// also the index of the first unapplied layer.
    pub fn applied_count(&self) -> usize {
        self.applied.load(Ordering::Acquire)
    }

    pub fn executed_count(&self) -> usize {
        self.executed.load(Ordering::Acquire)
    }

    pub fn mark_constructed(&self, i: usize) {
        self.words[i].fetch_or(CONSTRUCTED, Ordering::AcqRel);
    }

    pub fn mark_retrieved(&self, i: usize) {
        self.words[i].fetch_or(RETRIEVED, Ordering::AcqRel);
    }

    fn ready_to_apply(&self, i: usize) -> bool {
        let w = self.word(i);
        w & RETRIEVED != 0 && w & CONSTRUCTED != 0 && (i == 0 || self.has(i - 1, APPLIED))
    }

    pub fn mark_applied(&self, i: usize) -> Result<(), PipelineError> {
        if !self.ready_to_apply(i) {
            return Err(PipelineError::InvariantViolation(format!("layer {i} applied while {:?}", self.progress(i))));
        }
        let prev = self.words[i].fetch_or(APPLIED, Ordering::AcqRel);
        if prev & APPLIED != 0 {
            return Err(PipelineError::InvariantViolation(format!("layer {i} applied twice")));
        }
        self.applied.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn mark_executed(&self, i: usize) -> Result<(), PipelineError> {
        if !self.has(i, APPLIED) || (i > 0 && !self.has(i - 1, EXECUTED)) {
            return Err(PipelineError::InvariantViolation(format!("layer {i} executed while {:?}", self.progress(i))));
        }
        let prev = self.words[i].fetch_or(EXECUTED, Ordering::AcqRel);
        if prev & EXECUTED != 0 {
            return Err(PipelineError::InvariantViolation(format!("layer {i} executed twice")));
        }
        self.executed.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn claim_if(&self, i: usize, bit: u8, ready: impl FnOnce() -> bool) -> bool {
        let _guard = self.claim[i].lock().expect("tracker lock poisoned");
        if self.has(i, bit) || !ready() {
            return false;
        }
        self.words[i].fetch_or(bit, Ordering::AcqRel);
        true
    }

    /// True exactly once, the first time all three apply conditions hold.
    pub fn claim_apply(&self, i: usize) -> bool {
        self.claim_if(i, APPLY_CLAIMED, || self.ready_to_apply(i))
    }

    /// Monolithic load (retrieve then apply on one worker): constructed and
    /// predecessor applied. True at most once.
    pub fn claim_load(&self, i: usize) -> bool {
        self.claim_if(i, APPLY_CLAIMED, || self.has(i, CONSTRUCTED) && (i == 0 || self.has(i - 1, APPLIED)))
    }

    pub fn claim_execute(&self, i: usize) -> bool {
        self.claim_if(i, EXECUTE_CLAIMED, || self.has(i, APPLIED) && (i == 0 || self.has(i - 1, EXECUTED)))
    }

    /// The apply worker would run layer `i` next but its weights are missing.
    pub fn stalled_on_retrieval(&self, i: usize) -> bool {
        let w = self.word(i);
        w & CONSTRUCTED != 0 && w & RETRIEVED == 0 && w & APPLY_CLAIMED == 0 && (i == 0 || self.has(i - 1, APPLIED))
    }

    pub fn all_executed(&self) -> bool {
        self.executed_count() == self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        for bits in 0u8..16 {
            for i in 0..2usize {
                let mut p = vec![LayerProgress::default(); 2];
                p[i].retrieved = bits & 1 != 0;
                p[i].constructed = bits & 2 != 0;
                if i == 1 {
                    p[0].applied = bits & 4 != 0;
                }
                let oracle = match (i, bits & 1, bits & 2, bits & 4) {
                    (0, 1, 2, _) => true,
                    (1, 1, 2, 4) => true,
                    _ => false,
                };
                assert_eq!(can_apply(&p, i), oracle, "bits {bits:#b} i {i}");
            }
        }
    }

    #[test]
    fn predecessor_gates_apply() {
        let t = DependencyTracker::new(3);
        t.mark_constructed(2);
        t.mark_retrieved(2);
        assert!(!t.claim_apply(2));
        assert!(!can_apply(&t.snapshot(), 2));
        assert!(t.mark_applied(2).is_err());
    }

    #[test]
    fn claims_happen_once() {
        let t = DependencyTracker::new(1);
        t.mark_constructed(0);
        t.mark_retrieved(0);
        assert!(t.claim_apply(0));
        assert!(!t.claim_apply(0));
        t.mark_applied(0).unwrap();
        assert!(t.mark_applied(0).is_err());
        assert!(t.claim_execute(0));
        assert!(!t.claim_execute(0));
        t.mark_executed(0).unwrap();
        assert!(t.all_executed());
    }

    #[test]
    fn stall_detection_needs_construction() {
        let t = DependencyTracker::new(2);
        assert!(!t.stalled_on_retrieval(0));
        t.mark_constructed(0);
        assert!(t.stalled_on_retrieval(0));
        t.mark_retrieved(0);
        assert!(!t.stalled_on_retrieval(0));
    }
}
