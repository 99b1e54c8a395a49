//! Plain-text outputs: metrics tables, spike rasters and a line chart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::engine::SpikeEvent;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = MetricsRecord::COLUMNS.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_fields().join(","));
        out.push('\n');
    }
    out
}

pub fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidValue(format!("metrics line: {e}"))))
        .collect()
}

/// `layer,neuron,t` with six decimals, in emission order.
pub fn raster_csv(events: &[SpikeEvent]) -> String {
    let mut out = String::from("layer,neuron,t\n");
    for e in events {
        let _ = writeln!(out, "{},{},{:.6}", e.layer, e.neuron, e.t);
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One polyline of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Static SVG line chart with axes, min/max tick labels and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{left},{top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (v, anchor_y) in [(y0, top + ph), (y1, top)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, anchor_y + 4.0, tick(v));
    }
    for (v, anchor_x) in [(x0, left), (x1, left + pw)] {
        let _ = writeln!(out, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 16.0, tick(v));
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = write!(d, "{}{:.2},{:.2} ", if d.is_empty() { "M" } else { "L" }, sx(x), sy(y));
        }
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.trim_end());
        }
        let ly = top + 14.0 + 16.0 * k as f64;
        let lx = left + pw - 150.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 20.0, ly - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 26.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Objective curves of several logs, one series per log.
pub fn objective_chart(logs: &[(&str, &[MetricsRecord])]) -> String {
    let series: Vec<Series> = logs
        .iter()
        .map(|(label, recs)| Series {
            label: (*label).to_string(),
            points: recs
                .iter()
                .filter_map(|r| r.objective.map(|o| (r.iteration as f64, o)))
                .collect(),
        })
        .collect();
    svg_line_chart("Surrogate objective", "iteration", "objective", &series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Layer;

    #[test]
    fn raster_has_six_decimals() {
        let ev = [SpikeEvent {
            layer: Layer::Input,
            neuron: 3,
            t: 1.0 / 32.0,
        }];
        assert_eq!(raster_csv(&ev), "layer,neuron,t\ninput,3,0.031250\n");
        assert_eq!(raster_csv(&[]), "layer,neuron,t\n");
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![MetricsRecord::sgd(0, Some(0.5), 1.0), MetricsRecord::sgd(50, None, 0.9)];
        let back = parse_metrics_jsonl(&metrics_jsonl(&recs)).unwrap();
        assert_eq!(back, recs);
        assert_eq!(metrics_csv(&recs).lines().count(), 3);
    }

    #[test]
    fn chart_is_svg() {
        let s = svg_line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "a<b".into(),
                points: vec![(0.0, 1.0), (1.0, 0.5)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
    }
}
