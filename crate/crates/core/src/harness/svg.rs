//! Minimal deterministic SVG heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const CELL_W: f64 = 64.0;
const CELL_H: f64 = 40.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const MARGIN_R: f64 = 20.0;

/// A dense grid: `values[row][col]`, `None` for failed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub title: String,
    pub row_label: String,
    pub col_label: String,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

fn push_unique(axis: &mut Vec<f64>, v: f64) {
    if !axis.iter().any(|a| a.to_bits() == v.to_bits()) {
        axis.push(v);
    }
}

impl HeatmapGrid {
    /// Builds a grid from `(row, col, value)` triples; repeated coordinates are
    /// averaged over their finite values.
    pub fn from_triples(title: &str, row_label: &str, col_label: &str, triples: &[(f64, f64, Option<f64>)]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Empty { what: "heatmap cells".into() });
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for &(r, c, _) in triples {
            push_unique(&mut rows, r);
            push_unique(&mut cols, c);
        }
        rows.sort_by(f64::total_cmp);
        cols.sort_by(f64::total_cmp);
        let mut sums = vec![vec![(0.0, 0usize); cols.len()]; rows.len()];
        for &(r, c, v) in triples {
            let i = rows.iter().position(|a| a.to_bits() == r.to_bits()).expect("row present");
            let j = cols.iter().position(|a| a.to_bits() == c.to_bits()).expect("col present");
            if let Some(v) = v.filter(|v| v.is_finite()) {
                sums[i][j].0 += v;
                sums[i][j].1 += 1;
            }
        }
        let values = sums
            .into_iter()
            .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
            .collect();
        Ok(Self {
            title: title.to_string(),
            row_label: row_label.to_string(),
            col_label: col_label.to_string(),
            rows,
            cols,
            values,
        })
    }

    pub fn to_svg(&self) -> String {
        let finite: Vec<f64> = self.values.iter().flatten().flatten().cloned().collect();
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = MARGIN_L + CELL_W * self.cols.len() as f64 + MARGIN_R;
        let height = MARGIN_T + CELL_H * self.rows.len() as f64 + MARGIN_B;

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            width / 2.0,
            escape(&self.title)
        );
        // Rows are drawn bottom-up so the y axis increases upwards.
        let n_rows = self.rows.len();
        for (i, row) in self.values.iter().enumerate() {
            let y = MARGIN_T + CELL_H * (n_rows - 1 - i) as f64;
            for (j, v) in row.iter().enumerate() {
                let x = MARGIN_L + CELL_W * j as f64;
                let (fill, label) = match v {
                    Some(v) => (colour(*v, lo, hi), format!("{v:.2}")),
                    None => ("#bbbbbb".to_string(), "n/a".to_string()),
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#ffffff"/>"##
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                    x + CELL_W / 2.0,
                    y + CELL_H / 2.0 + 4.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                y + CELL_H / 2.0 + 4.0,
                self.rows[i]
            );
        }
        let base = MARGIN_T + CELL_H * n_rows as f64;
        for (j, c) in self.cols.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{c}</text>"#,
                MARGIN_L + CELL_W * (j as f64 + 0.5),
                base + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_L + CELL_W * self.cols.len() as f64 / 2.0,
            base + 38.0,
            escape(&self.col_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            MARGIN_T + CELL_H * n_rows as f64 / 2.0,
            MARGIN_T + CELL_H * n_rows as f64 / 2.0,
            escape(&self.row_label)
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear dark-blue → yellow ramp over `[lo, hi]`.
fn colour(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (a, b) = ([0x30, 0x12, 0x6e], [0xf6, 0xe6, 0x20]);
    let ch = |i: usize| (a[i] as f64 + t * (b[i] as f64 - a[i] as f64)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
}

/// Reads a CSV whose first three columns are row axis, column axis and value
/// (`#` lines are comments, an empty value marks a failed cell) and writes the
/// heatmap as SVG.
pub fn render_heatmap(csv_path: &Path, out_svg: &Path) -> Result<()> {
    let grid = read_grid_csv(csv_path)?;
    fs::write(out_svg, grid.to_svg())?;
    Ok(())
}

pub fn read_grid_csv(csv_path: &Path) -> Result<HeatmapGrid> {
    if !csv_path.exists() {
        return Err(Error::MissingFile(csv_path.to_path_buf()));
    }
    let name = csv_path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(csv_path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 {
        return Err(Error::Csv(format!("{name}: need row, column and value columns")));
    }
    let mut triples = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Csv(format!("{name}: record {}: {:?} is not a number", line + 1, &rec[i])))
        };
        let value = if rec[2].trim().is_empty() { None } else { Some(num(2)?) };
        triples.push((num(0)?, num(1)?, value));
    }
    let title = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HeatmapGrid::from_triples(&title, &headers[0], &headers[1], &triples)
}
