//! Minimal hand-written SVG charts.

use std::fmt::Write as _;

use cleanpose::metrics::METRIC_NAMES;
use cleanpose::train::{RunRecord, TrainConfig, YawHistograms, YawSamples};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Frame {
    svg: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = write!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = write!(svg, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
        let _ = write!(
            svg,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        let mut frame = Self { svg, x, y };
        for k in 0..=4 {
            let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
            let py = frame.py(v);
            let _ = write!(frame.svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 4.0, py + 4.0, tick(v));
            let _ = write!(frame.svg, r##"<line x1="{l}" y1="{py}" x2="{r}" y2="{py}" stroke="#ddd"/>"##);
        }
        frame
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn x_ticks(&mut self, ticks: &[f64]) {
        for &v in ticks {
            let px = self.px(v);
            let _ = write!(self.svg, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, HEIGHT - MARGIN + 16.0, tick(v));
        }
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str, dashed: bool) {
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = write!(self.svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, pts.join(" "));
    }

    fn rect(&mut self, x0: f64, x1: f64, y: f64, color: &str) {
        let (l, r) = (self.px(x0), self.px(x1));
        let (top, base) = (self.py(y), self.py(self.y.0));
        let _ = write!(self.svg, r#"<rect x="{l:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#, r - l, base - top);
    }

    fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN + 14.0 * i as f64;
            let x = WIDTH - MARGIN - 150.0;
            let _ = write!(self.svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = write!(self.svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(label));
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Step outline of a histogram over `[-180, 180)` degrees.
fn steps(h: &[f64]) -> Vec<(f64, f64)> {
    let w = 360.0 / h.len() as f64;
    let mut pts = Vec::with_capacity(2 * h.len());
    for (b, &v) in h.iter().enumerate() {
        let x0 = -180.0 + b as f64 * w;
        pts.push((x0, v));
        pts.push((x0 + w, v));
    }
    pts
}

/// Train, test and predicted yaw histograms of the asymmetric categories.
pub fn yaw_histograms(name: &str, samples: &YawSamples, bins: usize) -> String {
    let h = YawHistograms::from_samples(samples, bins);
    let uniform = 1.0 / bins as f64;
    let top = h.train_gt.iter().chain(&h.test_gt).chain(&h.predicted).fold(uniform, |a, &b| a.max(b)) * 1.1;
    let mut f = Frame::new(&format!("yaw distribution: {name}"), (-180.0, 180.0), (0.0, top), "yaw (degrees)", "fraction");
    f.x_ticks(&[-180.0, -90.0, 0.0, 90.0, 180.0]);
    let series = [("train gt", &h.train_gt, PALETTE[7]), ("test gt", &h.test_gt, PALETTE[2]), ("predicted", &h.predicted, PALETTE[1])];
    for (_, values, color) in series {
        f.polyline(&steps(values), color, false);
    }
    f.polyline(&[(-180.0, uniform), (180.0, uniform)], PALETTE[0], true);
    let mut legend: Vec<(&str, &str)> = series.iter().map(|(l, _, c)| (*l, *c)).collect();
    legend.push(("uniform", PALETTE[0]));
    f.legend(&legend);
    f.finish()
}

/// Grouped bars of every mean metric, one color per record.
pub fn metric_bars(records: &[(String, RunRecord)]) -> String {
    let n = records.len() as f64;
    let mut f = Frame::new("mean accuracy by metric", (0.0, METRIC_NAMES.len() as f64), (0.0, 1.0), "metric", "accuracy");
    for (m, label) in METRIC_NAMES.iter().enumerate() {
        let px = f.px(m as f64 + 0.5);
        let _ = write!(f.svg, r#"<text x="{px}" y="{}" text-anchor="middle">{label}</text>"#, HEIGHT - MARGIN + 16.0);
        for (r, (_, rec)) in records.iter().enumerate() {
            let x0 = m as f64 + 0.1 + 0.8 * r as f64 / n;
            f.rect(x0, x0 + 0.8 / n, rec.eval().mean[m], PALETTE[r % PALETTE.len()]);
        }
    }
    let legend: Vec<(&str, &str)> = records.iter().enumerate().map(|(r, (name, _))| (name.as_str(), PALETTE[r % PALETTE.len()])).collect();
    f.legend(&legend);
    f.finish()
}

/// Learning rate over the configured iterations.
pub fn lr_curve(config: &TrainConfig) -> String {
    let total = config.total_iterations.max(1);
    let top = config.max_lr.max(config.base_lr) * 1.1;
    let mut f = Frame::new("learning rate schedule", (0.0, total as f64), (0.0, top), "iteration", "learning rate");
    f.x_ticks(&[0.0, total as f64 / 2.0, total as f64]);
    let step = (total / 500).max(1);
    let pts: Vec<(f64, f64)> = (0..=total).step_by(step).map(|i| (i as f64, config.lr(i))).collect();
    f.polyline(&pts, PALETTE[0], false);
    f.finish()
}
