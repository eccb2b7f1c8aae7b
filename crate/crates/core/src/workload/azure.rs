//! Converter for the public serverless invocation-count schema:
//! `HashOwner,HashApp,HashFunction,Trigger,1,2,...,1440`, one row per
//! function, one column per minute of the day holding its invocation count.

use std::io::Read;

use super::{TraceRecord, WorkloadError};
use crate::rng::SplitMix64;

const MINUTE_MS: u64 = 60_000;
const FIXED_COLUMNS: usize = 4;

/// Replays minutes `start_minute .. start_minute + duration_min` (1-based
/// column names) of every function row. Each function is bound to one of
/// `model_ids`, drawn in row order from `seed`; a minute's invocations are
/// evenly spaced inside it.
pub fn convert_azure_invocations<R: Read>(
    reader: R,
    start_minute: u32,
    duration_min: u32,
    model_ids: &[String],
    seed: u64,
) -> Result<Vec<TraceRecord>, WorkloadError> {
    if model_ids.is_empty() {
        return Err(WorkloadError::InvalidPlan("no models to assign functions to".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = reader.headers()?.clone();
    let mut columns = Vec::with_capacity(duration_min as usize);
    for m in start_minute..start_minute + duration_min {
        let name = m.to_string();
        let col = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| WorkloadError::Malformed { line: 1, reason: format!("no column for minute {m}") })?;
        columns.push(col);
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() < FIXED_COLUMNS {
            return Err(WorkloadError::Malformed { line, reason: "missing function columns".into() });
        }
        let model = &model_ids[rng.below(model_ids.len() as u64) as usize];
        for (k, &col) in columns.iter().enumerate() {
            let cell = row.get(col).unwrap_or("0").trim();
            let count: u64 =
                cell.parse().map_err(|_| WorkloadError::Malformed { line, reason: format!("bad count `{cell}`") })?;
            for j in 0..count {
                out.push(TraceRecord {
                    offset_ms: k as u64 * MINUTE_MS + (2 * j + 1) * MINUTE_MS / (2 * count),
                    model_id: model.clone(),
                });
            }
        }
    }
    out.sort_by_key(|r| r.offset_ms);
    Ok(out)
}
