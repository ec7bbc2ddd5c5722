//! Offline figures: trajectory overlay and ATE over time, each as SVG plus
//! the CSV it was drawn from.

use std::fmt::Write as _;

use crate::app::ate::associate;
use crate::app::pipeline::{history_to_csv, HistoryRow};
use crate::geom::Pose3;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;

struct Frame {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl Frame {
    /// Maps data bounds onto the plot area. `equal` keeps one scale for
    /// both axes (maps), otherwise each axis is stretched (time series).
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Frame {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else if lo.is_finite() {
                (lo - 0.5, lo + 0.5)
            } else {
                (0.0, 1.0)
            }
        };
        let (x_lo, x_hi) = span(&mut xs.clone());
        let (y_lo, y_hi) = span(&mut ys.clone());
        let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let (mut sx, mut sy) = (w / (x_hi - x_lo), h / (y_hi - y_lo));
        if equal {
            sx = sx.min(sy);
            sy = sx;
        }
        Frame { x0: x_lo, y0: y_lo, sx, sy }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.x0) * self.sx, HEIGHT - MARGIN - (y - self.y0) * self.sy)
    }

    fn polyline(&self, pts: &[(f64, f64)], color: &str) -> String {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (u, v) = self.map(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", coords.join(" "))
    }
}

fn document(title: &str, x_label: &str, y_label: &str, body: &str, legend: &[(&str, &str)]) -> String {
    let mut s = String::new();
    writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">").unwrap();
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )
    .unwrap();
    writeln!(s, "<text x=\"{}\" y=\"25\" text-anchor=\"middle\" font-size=\"16\">{title}</text>", WIDTH / 2.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>", WIDTH / 2.0, HEIGHT - 15.0)
        .unwrap();
    writeln!(
        s,
        "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 15 {})\">{y_label}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )
    .unwrap();
    s.push_str(body);
    for (i, (name, color)) in legend.iter().enumerate() {
        let y = MARGIN + 15.0 + 15.0 * i as f64;
        writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" font-size=\"12\">{name}</text>",
            MARGIN + 10.0,
            MARGIN + 30.0,
            MARGIN + 35.0,
            y + 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Top-down overlay of truth and estimate. Returns (svg, csv); the CSV
/// holds one row per estimate pose with its associated truth position.
pub fn trajectory_plot(truth: &[(f64, Pose3)], estimate: &[(f64, Pose3)]) -> (String, String) {
    let t: Vec<(f64, f64)> = truth.iter().map(|(_, p)| (p.x(), p.y())).collect();
    let e: Vec<(f64, f64)> = estimate.iter().map(|(_, p)| (p.x(), p.y())).collect();
    let frame = Frame::new(t.iter().chain(&e).map(|p| p.0), t.iter().chain(&e).map(|p| p.1), true);
    let body = frame.polyline(&t, "black") + &frame.polyline(&e, "#d62728");
    let svg = document("trajectory", "x (m)", "y (m)", &body, &[("truth", "black"), ("estimate", "#d62728")]);
    let mut csv = String::from("time,est_x,est_y,truth_x,truth_y\n");
    for e in estimate {
        if let Some((a, b)) = associate(std::slice::from_ref(e), truth).first() {
            writeln!(csv, "{},{},{},{},{}", e.0, a.x, a.y, b.x, b.y).unwrap();
        }
    }
    (svg, csv)
}

/// ATE of the estimate so far and position error of the newest state
/// against time; steps that added loop closures are marked on the error
/// curve. Returns (svg, csv).
pub fn ate_over_time_plot(history: &[HistoryRow]) -> (String, String) {
    let pts: Vec<(f64, f64)> = history.iter().filter_map(|h| h.ate.map(|a| (h.time, a))).collect();
    let current: Vec<(f64, f64)> = history.iter().map(|h| (h.time, h.current_error)).collect();
    let ys = pts.iter().chain(&current).map(|p| p.1).chain([0.0]);
    let frame = Frame::new(current.iter().map(|p| p.0), ys, false);
    let mut body = frame.polyline(&pts, "#1f77b4") + &frame.polyline(&current, "#ff7f0e");
    for h in history.iter().filter(|h| h.closures > 0) {
        let (u, v) = frame.map(h.time, h.current_error);
        writeln!(body, "<circle cx=\"{u:.2}\" cy=\"{v:.2}\" r=\"3\" fill=\"#2ca02c\"/>").unwrap();
    }
    let legend = [("ATE so far", "#1f77b4"), ("current position error", "#ff7f0e"), ("loop closure", "#2ca02c")];
    let svg = document("ATE over time", "time (s)", "error (m)", &body, &legend);
    let csv = history_to_csv(history);
    (svg, csv)
}
