use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{EventLog, MetricsError, Stage, StageInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanttFormat {
    Svg,
    Csv,
    Json,
}

impl FromStr for GanttFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "svg" => Ok(GanttFormat::Svg),
            "csv" => Ok(GanttFormat::Csv),
            "json" => Ok(GanttFormat::Json),
            other => Err(format!("unknown gantt format `{other}`")),
        }
    }
}

/// `request_id,stage,layer,start_us,end_us`, one row per interval.
pub fn to_csv(events: &[StageInterval]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in events {
        w.serialize(e)?;
    }
    if events.is_empty() {
        w.write_record(["request_id", "stage", "layer", "start_us", "end_us"])?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetricsError::Format(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<StageInterval>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let events = r.deserialize().collect::<Result<Vec<StageInterval>, _>>()?;
    if let Some(bad) = events.iter().find(|e| e.end < e.start) {
        return Err(MetricsError::InvalidInterval { start: bad.start.to_string(), end: bad.end.to_string() });
    }
    Ok(events)
}

pub fn to_json(log: &EventLog) -> Result<String, MetricsError> {
    Ok(serde_json::to_string_pretty(log)?)
}

pub fn parse_json(text: &str) -> Result<EventLog, MetricsError> {
    Ok(serde_json::from_str(text)?)
}

const WIDTH: f64 = 1200.0;
const LEFT: f64 = 48.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 28.0;
const ROW: f64 = 34.0;
const BAR: f64 = 24.0;

fn layer_color(layer: u32) -> String {
    let hue = (f64::from(layer) * 137.508) % 360.0;
    format!("hsl({hue:.1},62%,55%)")
}

/// Self-contained SVG timeline: rows L, R, A, E from top to bottom, one
/// colour per layer. Allocation segments are drawn hatched on the L row.
pub fn render_svg(log: &EventLog) -> String {
    let starts = log.events.iter().map(|e| e.start).chain(log.alloc_segments.iter().map(|s| s.start));
    let ends = log.events.iter().map(|e| e.end).chain(log.alloc_segments.iter().map(|s| s.end));
    let t0 = starts.min().unwrap_or(0);
    let t1 = ends.max().unwrap_or(0).max(t0 + 1);
    let scale = (WIDTH - LEFT - RIGHT) / (t1 - t0) as f64;
    let x = |t: u64| LEFT + (t - t0) as f64 * scale;
    let height = TOP + ROW * 4.0 + 24.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="monospace" font-size="12">"#
    );
    s.push_str(
        r#"<defs><pattern id="hatch" patternUnits="userSpaceOnUse" width="6" height="6" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="black" stroke-width="2"/></pattern></defs>
"#,
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="16">{} {} (0 .. {} us)</text>"#,
        escape(&log.header.strategy),
        escape(&log.header.model_id),
        t1 - t0
    );
    for stage in Stage::ALL {
        let y = TOP + ROW * stage.row() as f64;
        let _ = writeln!(s, r#"<text x="8" y="{:.2}">{stage}</text>"#, y + BAR * 0.7);
    }
    for e in &log.events {
        let y = TOP + ROW * e.stage.row() as f64;
        let _ = writeln!(
            s,
            r#"<rect class="stage" data-stage="{}" data-layer="{}" data-request="{}" x="{:.2}" y="{y:.2}" width="{:.2}" height="{BAR}" fill="{}"><title>req {} {}{} [{}, {}]</title></rect>"#,
            e.stage,
            e.layer_index,
            e.request_id,
            x(e.start),
            (e.end - e.start) as f64 * scale,
            layer_color(e.layer_index),
            e.request_id,
            e.stage,
            e.layer_index,
            e.start,
            e.end
        );
    }
    for a in &log.alloc_segments {
        let y = TOP + ROW * Stage::L.row() as f64;
        let _ = writeln!(
            s,
            r#"<rect class="alloc" data-layer="{}" data-request="{}" x="{:.2}" y="{y:.2}" width="{:.2}" height="{BAR}" fill="url(#hatch)" stroke="{}"><title>req {} alloc L{} [{}, {}]</title></rect>"#,
            a.layer_index,
            a.request_id,
            x(a.start),
            (a.end - a.start) as f64 * scale,
            layer_color(a.layer_index),
            a.request_id,
            a.layer_index,
            a.start,
            a.end
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn export_gantt(log: &EventLog, format: GanttFormat, path: &Path) -> Result<(), MetricsError> {
    if log.events.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let text = match format {
        GanttFormat::Svg => render_svg(log),
        GanttFormat::Csv => to_csv(&log.events)?,
        GanttFormat::Json => to_json(log)?,
    };
    std::fs::write(path, text).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{AllocSegment, RunHeader};

    fn log(events: Vec<StageInterval>) -> EventLog {
        EventLog {
            header: RunHeader {
                strategy: "cicada".into(),
                model_id: "m".into(),
                seed: 1,
                time_scale: 1.0,
                wall_clock: None,
            },
            events,
            alloc_segments: Vec::new(),
        }
    }

    fn one() -> StageInterval {
        StageInterval { request_id: 3, stage: Stage::R, layer_index: 2, start: 10, end: 25 }
    }

    #[test]
    fn single_interval_exports() {
        let l = log(vec![one()]);
        let svg = render_svg(&l);
        assert_eq!(svg.matches("<rect").count(), 1);
        let csv = to_csv(&l.events).unwrap();
        assert_eq!(csv, "request_id,stage,layer,start_us,end_us\n3,R,2,10,25\n");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let mut l = log(vec![one(), StageInterval { stage: Stage::E, start: 30, end: 31, ..one() }]);
        l.alloc_segments.push(AllocSegment { request_id: 3, layer_index: 0, start: 0, end: 4 });
        assert_eq!(parse_csv(&to_csv(&l.events).unwrap()).unwrap(), l.events);
        assert_eq!(parse_json(&to_json(&l).unwrap()).unwrap(), l);
    }

    #[test]
    fn alloc_segments_are_hatched() {
        let mut l = log(vec![one()]);
        l.alloc_segments.push(AllocSegment { request_id: 3, layer_index: 0, start: 0, end: 4 });
        let svg = render_svg(&l);
        assert_eq!(svg.matches(r#"class="stage""#).count(), 1);
        assert_eq!(svg.matches(r#"class="alloc""#).count(), 1);
        assert!(svg.contains("url(#hatch)"));
    }

    #[test]
    fn unwritable_path_and_empty_run() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("g.svg");
        assert!(matches!(export_gantt(&log(vec![one()]), GanttFormat::Svg, &bad), Err(MetricsError::Io { .. })));
        assert!(matches!(export_gantt(&log(vec![]), GanttFormat::Csv, &bad), Err(MetricsError::EmptyRun)));
    }

    #[test]
    fn reversed_csv_row_rejected() {
        let text = "request_id,stage,layer,start_us,end_us\n0,L,0,9,3\n";
        assert!(matches!(parse_csv(text), Err(MetricsError::InvalidInterval { .. })));
    }
}
