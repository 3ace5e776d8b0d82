//! Deterministic SVG line and bar charts from CSV tables.
//!
//! The first column labels the x axis (numeric for line charts when every
//! cell parses); each further column is one series.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IflError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Line,
    Bar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub x_name: String,
    pub labels: Vec<String>,
    pub series: Vec<String>,
    /// `cells[row][series]`; `None` for empty or non-numeric cells.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 {
            return Err(IflError::Invalid(format!("{}: need at least two columns", path.display())));
        }
        let mut labels = Vec::new();
        let mut cells = Vec::new();
        for row in rdr.records() {
            let row = row?;
            labels.push(row.get(0).unwrap_or("").to_string());
            cells.push(
                (1..header.len())
                    .map(|c| row.get(c).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
                    .collect(),
            );
        }
        if cells.is_empty() {
            return Err(IflError::EmptyTable(path.to_path_buf()));
        }
        Ok(Self {
            x_name: header[0].clone(),
            labels,
            series: header[1..].to_vec(),
            cells,
        })
    }

    /// The table restricted to one series.
    pub fn column(&self, name: &str) -> Option<Table> {
        let c = self.series.iter().position(|s| s == name)?;
        Some(Table {
            x_name: self.x_name.clone(),
            labels: self.labels.clone(),
            series: vec![name.to_string()],
            cells: self.cells.iter().map(|r| vec![r[c]]).collect(),
        })
    }

    fn numeric_x(&self) -> Option<Vec<f64>> {
        self.labels.iter().map(|l| l.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn y_scale(values: impl Iterator<Item = f64>) -> Scale {
    let (mut lo, mut hi) = (0.0f64, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !hi.is_finite() || hi <= lo {
        hi = lo + 1.0;
    } else {
        hi += 0.05 * (hi - lo);
    }
    Scale {
        lo,
        hi,
        px_lo: HEIGHT - BOTTOM,
        px_hi: TOP,
    }
}

fn frame(svg: &mut String, title: &str, x_name: &str, y: &Scale) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        esc(title)
    );
    for i in 0..=4 {
        let v = y.lo + (y.hi - y.lo) * i as f64 / 4.0;
        let py = y.map(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##,
            WIDTH - RIGHT
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            fmt_num(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{b:.2}" x2="{:.2}" y2="{b:.2}" stroke="black"/>"#,
        WIDTH - RIGHT,
        b = HEIGHT - BOTTOM
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#,
        HEIGHT - BOTTOM
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0,
        esc(x_name)
    );
}

fn legend(svg: &mut String, series: &[String]) {
    for (s, name) in series.iter().enumerate() {
        let y = TOP + 18.0 * s as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{}"/>"#,
            WIDTH - RIGHT + 12.0,
            y,
            PALETTE[s % PALETTE.len()]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            WIDTH - RIGHT + 30.0,
            y + 10.0,
            esc(name)
        );
    }
}

fn warn_missing(t: &Table) {
    for (r, row) in t.cells.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if v.is_none() {
                log::warn!("row {} ({}), column {}: missing value, point omitted", r + 1, t.labels[r], t.series[c]);
            }
        }
    }
}

/// Renders `t` as an SVG document.
pub fn render(t: &Table, kind: PlotKind, title: &str) -> Result<String> {
    if t.cells.is_empty() {
        return Err(IflError::Invalid("table has no data rows".into()));
    }
    warn_missing(t);
    let y = y_scale(t.cells.iter().flatten().flatten().copied());
    let mut svg = String::new();
    frame(&mut svg, title, &t.x_name, &y);
    let n = t.labels.len();
    let (x0, x1) = (LEFT + 20.0, WIDTH - RIGHT - 20.0);
    match kind {
        PlotKind::Line => {
            let xs: Vec<f64> = match t.numeric_x() {
                Some(v) => v,
                None => (0..n).map(|i| i as f64).collect(),
            };
            let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            let x = if hi > lo {
                Scale { lo, hi, px_lo: x0, px_hi: x1 }
            } else {
                Scale { lo: lo - 1.0, hi: lo + 1.0, px_lo: x0, px_hi: x1 }
            };
            for (r, label) in t.labels.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    x.map(xs[r]),
                    HEIGHT - BOTTOM + 16.0,
                    esc(label)
                );
            }
            for s in 0..t.series.len() {
                let color = PALETTE[s % PALETTE.len()];
                let pts: Vec<(f64, f64)> = (0..n)
                    .filter_map(|r| t.cells[r][s].map(|v| (x.map(xs[r]), y.map(v))))
                    .collect();
                if pts.len() > 1 {
                    let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
                    let _ = writeln!(
                        svg,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        path.join(" ")
                    );
                }
                for (a, b) in pts {
                    let _ = writeln!(svg, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3.5" fill="{color}"/>"#);
                }
            }
        }
        PlotKind::Bar => {
            let k = t.series.len();
            let slot = (x1 - x0) / n as f64;
            let bar = slot * 0.8 / k as f64;
            let base = y.map(0.0f64.max(y.lo));
            for (r, label) in t.labels.iter().enumerate() {
                let left = x0 + slot * r as f64 + slot * 0.1;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    x0 + slot * (r as f64 + 0.5),
                    HEIGHT - BOTTOM + 16.0,
                    esc(label)
                );
                for s in 0..k {
                    if let Some(v) = t.cells[r][s] {
                        let py = y.map(v);
                        let _ = writeln!(
                            svg,
                            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                            left + bar * s as f64,
                            py.min(base),
                            bar,
                            (base - py).abs(),
                            PALETTE[s % PALETTE.len()]
                        );
                    }
                }
            }
        }
    }
    legend(&mut svg, &t.series);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads the CSV at `table`, renders it and writes `out`.
pub fn plot_file(table: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    let t = Table::read(table)?;
    let title = table.file_stem().and_then(|s| s.to_str()).unwrap_or("chart");
    std::fs::write(out, render(&t, kind, title)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(labels: &[&str], cells: Vec<Vec<Option<f64>>>) -> Table {
        Table {
            x_name: "x".into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            series: (0..cells[0].len()).map(|i| format!("s{i}")).collect(),
            cells,
        }
    }

    #[test]
    fn single_row_has_one_marker() {
        let svg = render(&table(&["1"], vec![vec![Some(0.5)]]), PlotKind::Line, "t").unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn missing_cell_omitted() {
        let t = table(&["1", "2", "4"], vec![vec![Some(0.1)], vec![None], vec![Some(0.3)]]);
        let svg = render(&t, PlotKind::Line, "t").unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        let bars = render(&t, PlotKind::Bar, "t").unwrap();
        assert_eq!(bars.matches("<rect").count(), 1 + 2 + 1);
    }

    #[test]
    fn deterministic_and_escaped() {
        let t = table(&["a<b", "c"], vec![vec![Some(1.0), Some(2.0)], vec![Some(0.0), None]]);
        let a = render(&t, PlotKind::Bar, "x & y").unwrap();
        assert_eq!(a, render(&t, PlotKind::Bar, "x & y").unwrap());
        assert!(a.contains("a&lt;b") && a.contains("x &amp; y"));
    }
}
