//! Plain SVG plots of metrics CSVs: training loss on a log axis and test
//! accuracy, against epoch, one polyline per file in each panel.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::train::{parse_metrics_csv, MetricsRecord};

const WIDTH: f64 = 960.0;
const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One named series read from a metrics CSV.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

pub fn load_series(paths: &[PathBuf]) -> Result<Vec<Series>> {
    if paths.is_empty() {
        return Err(HarnessError::Usage("plot needs at least one metrics CSV".into()));
    }
    paths
        .iter()
        .map(|p| {
            Ok(Series {
                label: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                records: parse_metrics_csv(p)?,
            })
        })
        .collect()
}

/// Reads the CSVs and writes the SVG to `out`.
pub fn plot(paths: &[PathBuf], out: &Path) -> Result<()> {
    let series = load_series(paths)?;
    let svg = render_svg(&series);
    std::fs::write(out, svg).map_err(|e| HarnessError::io(out, e))
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi }
    }

    fn map(&self, v: f64, len: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo) * len
    }
}

fn log_loss(r: &MetricsRecord) -> f64 {
    r.train_loss.max(1e-300).log10()
}

fn panel(svg: &mut String, series: &[Series], x0: f64, title: &str, class: &str, y: fn(&MetricsRecord) -> f64) {
    let xa = Axis::fit(series.iter().flat_map(|s| s.records.iter().map(|r| r.epoch as f64)));
    let ya = Axis::fit(series.iter().flat_map(|s| s.records.iter().map(y)));
    let y0 = MARGIN;
    let _ = writeln!(
        svg,
        r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{title}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">epoch {:.0}..{:.0}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 + PANEL_H + 18.0,
        xa.lo,
        xa.hi
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3}</text>"#,
        x0 - 4.0,
        y0 + 10.0,
        ya.hi
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3}</text>"#,
        x0 - 4.0,
        y0 + PANEL_H,
        ya.lo
    );
    for (i, s) in series.iter().enumerate() {
        let mut pts = String::new();
        for r in &s.records {
            let v = y(r);
            let v = if v.is_finite() { v } else { ya.hi };
            let px = x0 + xa.map(r.epoch as f64, PANEL_W);
            let py = y0 + PANEL_H - ya.map(v, PANEL_H);
            if !pts.is_empty() {
                pts.push(' ');
            }
            let _ = write!(pts, "{px:.2},{py:.2}");
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="{class}" fill="none" stroke="{}" stroke-width="1.5" points="{pts}"/>"#,
            COLORS[i % COLORS.len()]
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(series: &[Series]) -> String {
    let height = MARGIN + PANEL_H + 50.0 + 14.0 * series.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    panel(&mut svg, series, MARGIN, "log10 train loss", "loss", log_loss);
    panel(
        &mut svg,
        series,
        2.0 * MARGIN + PANEL_W,
        "test accuracy",
        "accuracy",
        |r| r.test_accuracy,
    );
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + PANEL_H + 40.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text class="legend" x="{MARGIN}" y="{y}" font-size="12" fill="{}">{}</text>"#,
            COLORS[i % COLORS.len()],
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
