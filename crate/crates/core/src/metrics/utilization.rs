use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{union_length, MetricsError, Stage, StageInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub total_active: u64,
    pub total_pipeline: u64,
    pub utilization: f64,
    pub per_stage_working: BTreeMap<Stage, u64>,
    pub per_stage_waiting: BTreeMap<Stage, u64>,
}

/// Merged-union active time over pipeline span, plus the per-stage
/// working/waiting breakdown.
///
/// Waiting time of a unit is its start minus the end of its predecessor,
/// clamped at zero: L_{i-1} for L_i, L_i for R_i, max(L_i, R_i) for A_i and
/// A_i for E_i. Predecessors are looked up within the same request; a unit
/// without one waits zero.
pub fn utilization(events: &[StageInterval]) -> Result<UtilizationReport, MetricsError> {
    if events.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let spans: Vec<_> = events.iter().map(StageInterval::span).collect();
    let total_active = union_length(&spans)?;
    let first = events.iter().map(|e| e.start).min().unwrap_or(0);
    let last = events.iter().map(|e| e.end).max().unwrap_or(0);
    let total_pipeline = last - first;
    let utilization = if total_pipeline == 0 { 1.0 } else { total_active as f64 / total_pipeline as f64 };

    let ends: HashMap<(u64, Stage, u32), u64> =
        events.iter().map(|e| ((e.request_id, e.stage, e.layer_index), e.end)).collect();
    let end_of = |e: &StageInterval, stage: Stage, layer: u32| ends.get(&(e.request_id, stage, layer)).copied();

    let mut per_stage_working: BTreeMap<Stage, u64> = Stage::ALL.iter().map(|&s| (s, 0)).collect();
    let mut per_stage_waiting = per_stage_working.clone();
    for e in events {
        *per_stage_working.get_mut(&e.stage).unwrap() += e.duration();
        let previous_end = match e.stage {
            Stage::L => e.layer_index.checked_sub(1).and_then(|p| end_of(e, Stage::L, p)),
            Stage::R => end_of(e, Stage::L, e.layer_index),
            Stage::A => end_of(e, Stage::L, e.layer_index).max(end_of(e, Stage::R, e.layer_index)),
            Stage::E => end_of(e, Stage::A, e.layer_index),
        };
        if let Some(prev) = previous_end {
            *per_stage_waiting.get_mut(&e.stage).unwrap() += e.start.saturating_sub(prev);
        }
    }

    Ok(UtilizationReport { total_active, total_pipeline, utilization, per_stage_working, per_stage_waiting })
}

/// One report per request id.
pub fn utilization_by_request(events: &[StageInterval]) -> Result<BTreeMap<u64, UtilizationReport>, MetricsError> {
    let mut grouped: BTreeMap<u64, Vec<StageInterval>> = BTreeMap::new();
    for e in events {
        grouped.entry(e.request_id).or_default().push(*e);
    }
    grouped.into_iter().map(|(id, evs)| utilization(&evs).map(|r| (id, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(stage: Stage, layer: u32, start: u64, end: u64) -> StageInterval {
        StageInterval { request_id: 0, stage, layer_index: layer, start, end }
    }

    #[test]
    fn single_interval_is_fully_utilized() {
        let r = utilization(&[ev(Stage::L, 0, 0, 100)]).unwrap();
        assert_eq!(r.utilization, 1.0);
        assert_eq!(r.total_active, 100);
    }

    #[test]
    fn disjoint_pair() {
        let r = utilization(&[ev(Stage::L, 0, 0, 10), ev(Stage::L, 1, 90, 100)]).unwrap();
        assert!((r.utilization - 0.2).abs() < 1e-12);
        assert_eq!(r.per_stage_waiting[&Stage::L], 80);
    }

    #[test]
    fn empty_run() {
        assert!(matches!(utilization(&[]), Err(MetricsError::EmptyRun)));
    }

    #[test]
    fn apply_waits_on_later_of_construction_and_retrieval() {
        let events =
            [ev(Stage::L, 0, 0, 50), ev(Stage::R, 0, 10, 70), ev(Stage::A, 0, 75, 80), ev(Stage::E, 0, 80, 90)];
        let r = utilization(&events).unwrap();
        assert_eq!(r.per_stage_waiting[&Stage::A], 5);
        assert_eq!(r.per_stage_waiting[&Stage::R], 0);
        assert_eq!(r.per_stage_waiting[&Stage::E], 0);
        assert_eq!(r.per_stage_working.values().sum::<u64>(), 50 + 60 + 5 + 10);
        assert_eq!(r.total_active, 85);
    }

    #[test]
    fn grouped_by_request() {
        let mut events = vec![ev(Stage::L, 0, 0, 10)];
        events.push(StageInterval { request_id: 1, ..ev(Stage::L, 0, 100, 110) });
        let reports = utilization_by_request(&events).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[&1].total_pipeline, 10);
    }
}
