use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorkloadError;
use crate::rng::SplitMix64;

const MINUTE_MS: u64 = 60_000;
/// Spread of the per-minute log-normal rate multiplier at burstiness 1.
const BURST_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub offset_ms: u64,
    pub model_id: String,
}

impl TraceRecord {
    pub fn offset_us(&self) -> u64 {
        self.offset_ms * 1000
    }
}

/// Reads an `offset_ms,model_id` CSV. The header row is optional;
/// `known_model` decides which ids resolve.
pub fn parse_trace(path: &Path, known_model: impl Fn(&str) -> bool) -> Result<Vec<TraceRecord>, WorkloadError> {
    let text = fs::read_to_string(path).map_err(|e| WorkloadError::io(path, e))?;
    parse_trace_str(&text, known_model)
}

pub fn parse_trace_str(text: &str, known_model: impl Fn(&str) -> bool) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && row.get(0) == Some("offset_ms") {
            continue;
        }
        if row.len() != 2 {
            return Err(WorkloadError::Malformed { line, reason: format!("expected 2 fields, found {}", row.len()) });
        }
        let (offset, model_id) = (&row[0], &row[1]);
        let offset_ms = match offset.parse::<i64>() {
            Ok(v) if v < 0 => return Err(WorkloadError::InvalidOffset { line, value: offset.into() }),
            Ok(v) => v as u64,
            Err(_) if offset.parse::<f64>().is_ok_and(|v| v < 0.0) => {
                return Err(WorkloadError::InvalidOffset { line, value: offset.into() })
            }
            Err(_) => {
                return Err(WorkloadError::Malformed { line, reason: format!("offset `{offset}` is not an integer") })
            }
        };
        if !known_model(model_id) {
            return Err(WorkloadError::UnknownModel { line, model_id: model_id.into() });
        }
        records.push(TraceRecord { offset_ms, model_id: model_id.into() });
    }
    records.sort_by_key(|r| r.offset_ms);
    Ok(records)
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["offset_ms", "model_id"])?;
    for r in records {
        w.write_record([r.offset_ms.to_string(), r.model_id.clone()])?;
    }
    w.flush().map_err(|e| WorkloadError::io(path, e))?;
    Ok(())
}

/// Synthetic trace of exactly `total_invocations` records over
/// `duration_min` minutes.
///
/// Each minute gets weight `(1 - b) + b * X` with `X` log-normal of mean 1;
/// counts follow the weights by largest remainder, so `b = 0` is as uniform
/// as integer counts allow. Invocations are evenly spaced inside their
/// minute. Model ids are drawn uniformly from `model_ids` on a separate
/// stream (empty ids if the list is empty).
pub fn synthesize_trace(
    duration_min: u32,
    total_invocations: u64,
    burstiness: f64,
    seed: u64,
    model_ids: &[String],
) -> Vec<TraceRecord> {
    let minutes = duration_min.max(1) as usize;
    let b = burstiness.clamp(0.0, 1.0);
    let mut rng = SplitMix64::new(seed);
    let weights: Vec<f64> = (0..minutes)
        .map(|_| {
            let x = (BURST_SIGMA * standard_normal(&mut rng) - BURST_SIGMA * BURST_SIGMA / 2.0).exp();
            (1.0 - b) + b * x
        })
        .collect();
    let counts = largest_remainder(&weights, total_invocations);

    let mut pick = SplitMix64::new(seed ^ 0x6d6f_6465_6c73);
    let mut out = Vec::with_capacity(total_invocations as usize);
    for (m, &c) in counts.iter().enumerate() {
        for k in 0..c {
            let within = (2 * k + 1) * MINUTE_MS / (2 * c);
            let model_id = if model_ids.is_empty() {
                String::new()
            } else {
                model_ids[pick.below(model_ids.len() as u64) as usize].clone()
            };
            out.push(TraceRecord { offset_ms: m as u64 * MINUTE_MS + within, model_id });
        }
    }
    out
}

fn standard_normal(rng: &mut SplitMix64) -> f64 {
    let u1 = 1.0 - rng.next_f64();
    let u2 = rng.next_f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Invocations per minute; at least `duration_min` bins.
pub fn minute_histogram(offsets_ms: impl IntoIterator<Item = u64>, duration_min: u32) -> Vec<u64> {
    let mut bins = vec![0u64; duration_min as usize];
    for off in offsets_ms {
        let m = (off / MINUTE_MS) as usize;
        if m >= bins.len() {
            bins.resize(m + 1, 0);
        }
        bins[m] += 1;
    }
    bins
}

/// Population standard deviation over mean; 0 for an empty or all-zero
/// series.
pub fn coefficient_of_variation(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any(_: &str) -> bool {
        true
    }

    #[test]
    fn empty_input_is_empty_trace() {
        assert!(parse_trace_str("", any).unwrap().is_empty());
        assert!(parse_trace_str("offset_ms,model_id\n", any).unwrap().is_empty());
    }

    #[test]
    fn three_rows_come_back_sorted() {
        let text = "offset_ms,model_id\n900,a\n10,b\n300,a\n";
        let offs: Vec<u64> = parse_trace_str(text, any).unwrap().iter().map(|r| r.offset_ms).collect();
        assert_eq!(offs, vec![10, 300, 900]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let known = |m: &str| m == "a";
        let err = parse_trace_str("offset_ms,model_id\n1,a\n2,zzz\n", known).unwrap_err();
        assert!(matches!(err, WorkloadError::UnknownModel { line: 3, .. }), "{err}");
        let err = parse_trace_str("1,a\n-5,a\n", known).unwrap_err();
        assert!(matches!(err, WorkloadError::InvalidOffset { line: 2, .. }), "{err}");
        let err = parse_trace_str("x,a\n", known).unwrap_err();
        assert!(matches!(err, WorkloadError::Malformed { line: 1, .. }), "{err}");
    }

    #[test]
    fn zero_burstiness_is_uniform() {
        let t = synthesize_trace(60, 2426, 0.0, 4, &["m".into()]);
        assert_eq!(t.len(), 2426);
        let h = minute_histogram(t.iter().map(|r| r.offset_ms), 60);
        let (lo, hi) = (*h.iter().min().unwrap(), *h.iter().max().unwrap());
        assert!(lo > 0 && hi <= 2 * lo, "{lo}..{hi}");
    }

    #[test]
    fn synthesis_is_deterministic_and_sorted() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let a = synthesize_trace(30, 500, 0.7, 9, &ids);
        assert_eq!(a, synthesize_trace(30, 500, 0.7, 9, &ids));
        assert!(a.windows(2).all(|w| w[0].offset_ms <= w[1].offset_ms));
        assert!(a.iter().all(|r| r.offset_ms < 30 * MINUTE_MS));
    }

    #[test]
    fn write_then_parse_round_trips() {
        let t = synthesize_trace(2, 20, 0.5, 1, &["x".into(), "y".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trace(&t, &p).unwrap();
        assert_eq!(parse_trace(&p, any).unwrap(), t);
    }

    #[test]
    fn cv_of_constant_series_is_zero() {
        assert_eq!(coefficient_of_variation(&[4, 4, 4]), 0.0);
        assert_eq!(coefficient_of_variation(&[]), 0.0);
        assert!((coefficient_of_variation(&[0, 2]) - 1.0).abs() < 1e-12);
    }
}
