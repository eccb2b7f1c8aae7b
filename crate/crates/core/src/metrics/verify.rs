use std::collections::BTreeMap;
use std::fmt;

use super::{EventLog, Stage, StageInterval};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub request_id: u64,
    pub layer_index: u32,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "request {} layer {}: {}", self.request_id, self.layer_index, self.message)
    }
}

/// Checks a recorded run: every layer of every request has exactly one
/// interval per stage, intervals are well formed, and
/// `start(A_i) >= max(end(L_i), end(R_i), end(A_{i-1}))`,
/// `start(E_i) >= max(end(A_i), end(E_{i-1}))`. An allocation segment must
/// also end before its layer's apply starts.
pub fn check_event_log(log: &EventLog) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut table: BTreeMap<(u64, u32), [Option<StageInterval>; 4]> = BTreeMap::new();
    for e in &log.events {
        let v = |message: String| Violation { request_id: e.request_id, layer_index: e.layer_index, message };
        if e.start > e.end {
            out.push(v(format!("{} ends before it starts ({} > {})", e.stage, e.start, e.end)));
        }
        let slot = &mut table.entry((e.request_id, e.layer_index)).or_default()[e.stage.row()];
        if slot.is_some() {
            out.push(v(format!("duplicate {} interval", e.stage)));
        }
        *slot = Some(*e);
    }
    let mut layers_of: BTreeMap<u64, u32> = BTreeMap::new();
    for &(req, layer) in table.keys() {
        let n = layers_of.entry(req).or_default();
        *n = (*n).max(layer + 1);
    }
    for (&req, &n) in &layers_of {
        for layer in 0..n {
            let v = |message: String| Violation { request_id: req, layer_index: layer, message };
            let Some(row) = table.get(&(req, layer)) else {
                out.push(v("no intervals recorded".into()));
                continue;
            };
            let missing: Vec<String> =
                Stage::ALL.iter().filter(|s| row[s.row()].is_none()).map(|s| s.to_string()).collect();
            if !missing.is_empty() {
                out.push(v(format!("missing {}", missing.join(", "))));
                continue;
            }
            let get = |s: Stage| row[s.row()].unwrap();
            let (l, r, a, e) = (get(Stage::L), get(Stage::R), get(Stage::A), get(Stage::E));
            if a.start < l.end {
                out.push(v(format!("A starts at {} before L ends at {}", a.start, l.end)));
            }
            if a.start < r.end {
                out.push(v(format!("A starts at {} before R ends at {}", a.start, r.end)));
            }
            if e.start < a.end {
                out.push(v(format!("E starts at {} before A ends at {}", e.start, a.end)));
            }
            if layer > 0 {
                if let Some(prev) = table.get(&(req, layer - 1)) {
                    if let Some(pa) = prev[Stage::A.row()] {
                        if a.start < pa.end {
                            out.push(v(format!("A starts at {} before previous A ends at {}", a.start, pa.end)));
                        }
                    }
                    if let Some(pe) = prev[Stage::E.row()] {
                        if e.start < pe.end {
                            out.push(v(format!("E starts at {} before previous E ends at {}", e.start, pe.end)));
                        }
                    }
                }
            }
        }
    }
    for s in &log.alloc_segments {
        let v = |message: String| Violation { request_id: s.request_id, layer_index: s.layer_index, message };
        if s.start > s.end {
            out.push(v("allocation segment ends before it starts".into()));
        }
        if let Some(a) = table.get(&(s.request_id, s.layer_index)).and_then(|row| row[Stage::A.row()]) {
            if a.start < s.end {
                out.push(v(format!("A starts at {} before allocation ends at {}", a.start, s.end)));
            }
        }
    }
    out
}
