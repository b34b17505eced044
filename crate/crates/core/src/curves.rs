//! Validation-IoU curves from one or more `history.csv` files: a merged
//! long-format CSV and a small standalone SVG chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::{csv_err, read_history};

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub run: String,
    /// `(epoch, val_IoU)` in file order.
    pub points: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct LongRow<'a> {
    run: &'a str,
    epoch: usize,
    #[serde(rename = "val_IoU")]
    val_iou: f64,
}

/// `runs/a/history.csv` is named `a`; any other file is named by its stem.
pub fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    match stem.as_deref() {
        Some("history") | None => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .or(stem)
            .unwrap_or_else(|| "run".into()),
        Some(s) => s.to_string(),
    }
}

pub fn read_curves(paths: &[PathBuf]) -> Result<Vec<Curve>> {
    if paths.is_empty() {
        return Err(Error::Config(
            "curves needs at least one history file".into(),
        ));
    }
    let mut curves: Vec<Curve> = Vec::with_capacity(paths.len());
    for path in paths {
        let rows = read_history(path)?;
        let mut run = run_name(path);
        let base = run.clone();
        let mut k = 2;
        while curves.iter().any(|c| c.run == run) {
            run = format!("{base}#{k}");
            k += 1;
        }
        if let Some(bad) = rows.iter().position(|r| !r.val_iou.is_finite()) {
            return Err(Error::Csv {
                path: path.clone(),
                line: bad as u64 + 2,
                msg: "val_IoU is not finite".into(),
            });
        }
        curves.push(Curve {
            run,
            points: rows.iter().map(|r| (r.epoch, r.val_iou)).collect(),
        });
    }
    Ok(curves)
}

pub fn write_long_csv(path: &Path, curves: &[Curve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for c in curves {
        for &(epoch, val_iou) in &c.points {
            w.serialize(LongRow {
                run: &c.run,
                epoch,
                val_iou,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Chart with IoU on a fixed `[0, 1]` y axis (SVG y grows downwards) and
/// epochs on x.
pub fn render_svg(curves: &[Curve]) -> String {
    let epochs = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0));
    let (lo, hi) = epochs.fold((usize::MAX, 0), |(a, b), e| (a.min(e), b.max(e)));
    let (lo, hi) = if lo > hi {
        (0, 1)
    } else {
        (lo, hi.max(lo + 1))
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |e: usize| LEFT + pw * (e - lo) as f64 / (hi - lo) as f64;
    let y = |v: f64| TOP + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1, y0, y1) = (LEFT, LEFT + pw, TOP + ph, TOP);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{yy}" x2="{x0}" y2="{yy}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            x0 - 4.0,
            x0 - 7.0,
            yy + 4.0
        );
    }
    for e in [lo, hi] {
        let xx = x(e);
        let _ = writeln!(
            s,
            r#"<line x1="{xx}" y1="{y0}" x2="{xx}" y2="{}" stroke="black"/><text x="{xx}" y="{}" text-anchor="middle">{e}</text>"#,
            y0 + 4.0,
            y0 + 17.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">val IoU</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(e, v)| format!("{:.2},{:.2}", x(e), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-run="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&c.run),
            pts.join(" ")
        );
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&c.run)
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Writes `<out>.csv` and `<out>.svg` and returns both paths.
pub fn emit(paths: &[PathBuf], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let curves = read_curves(paths)?;
    let csv_path = out.with_extension("csv");
    let svg_path = out.with_extension("svg");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_long_csv(&csv_path, &curves)?;
    std::fs::write(&svg_path, render_svg(&curves)).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}
