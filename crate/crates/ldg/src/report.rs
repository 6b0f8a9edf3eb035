//! `curves.csv` and `curves.svg` for a set of training records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::harness::{mean_variance, sort_records, Estimator, TrainingRecord};
use crate::io::{ensure_dir, read_rows, write_rows};

pub const CSV_NAME: &str = "curves.csv";
pub const SVG_NAME: &str = "curves.svg";

/// Writes both files into `out_dir` (created if missing).
pub fn emit_report(records: &[TrainingRecord], out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(HarnessError::Config("no training records to report".into()));
    }
    ensure_dir(out_dir)?;
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    write_rows(&out_dir.join(CSV_NAME), &sorted)?;
    let svg = render_svg(&sorted);
    let path = out_dir.join(SVG_NAME);
    fs::write(&path, svg).map_err(|e| HarnessError::io(&path, e))
}

pub fn read_curves(path: &Path) -> Result<Vec<TrainingRecord>> {
    read_rows(path)
}

/// Per iteration: mean and standard deviation of `J_1` across seeds.
pub fn band(records: &[TrainingRecord], estimator: Estimator) -> Vec<(usize, f64, f64)> {
    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.estimator == estimator) {
        by_iter.entry(r.iteration).or_default().push(r.j1);
    }
    by_iter
        .into_iter()
        .map(|(it, vals)| {
            let (mean, var) = mean_variance(&vals);
            (it, mean, var.sqrt())
        })
        .collect()
}

const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

fn color(e: Estimator) -> &'static str {
    COLORS[e as usize % COLORS.len()]
}

/// Line chart of mean `J_1` with a one-standard-deviation band per estimator.
pub fn render_svg(records: &[TrainingRecord]) -> String {
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (70.0, 180.0, 30.0, 50.0);
    let bands: Vec<(Estimator, Vec<(usize, f64, f64)>)> = Estimator::ALL
        .into_iter()
        .map(|e| (e, band(records, e)))
        .filter(|(_, b)| !b.is_empty())
        .collect();
    let x_max = bands.iter().flat_map(|(_, b)| b.iter().map(|p| p.0)).max().unwrap_or(0).max(1) as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, b) in &bands {
        for &(_, m, s) in b {
            y_min = y_min.min(m - s);
            y_max = y_max.max(m + s);
        }
    }
    if !(y_max > y_min) {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let px = |x: f64| left + x / x_max * (w - left - right);
    let py = |y: f64| top + (y_max - y) / (y_max - y_min) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0.0), px(x_max), py(y_min), py(y_max));
    let _ = writeln!(svg, r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" stroke="black" fill="none"/>"#);
    for i in 0..=5 {
        let xv = x_max * i as f64 / 5.0;
        let yv = y_min + (y_max - y_min) * i as f64 / 5.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#, px(xv), y0 + 18.0, xv);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4}</text>"#, x0 - 6.0, py(yv) + 4.0, yv);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#, (x0 + x1) / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">J1 (mean ± std)</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    for (k, (e, b)) in bands.iter().enumerate() {
        let c = color(*e);
        let upper: Vec<String> = b.iter().map(|&(i, m, s)| format!("{:.2},{:.2}", px(i as f64), py(m + s))).collect();
        let lower: Vec<String> = b.iter().rev().map(|&(i, m, s)| format!("{:.2},{:.2}", px(i as f64), py(m - s))).collect();
        let _ = writeln!(svg, r#"<polygon class="band" points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let mean: Vec<String> = b.iter().map(|&(i, m, _)| format!("{:.2},{:.2}", px(i as f64), py(m))).collect();
        let _ = writeln!(svg, r#"<polyline class="mean" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, mean.join(" "));
        let ly = top + 20.0 * k as f64 + 10.0;
        let lx = w - right + 15.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, e.name());
    }
    svg.push_str("</svg>\n");
    svg
}
