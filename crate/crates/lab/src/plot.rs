//! SVG rendering of CSV artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use tdlab_core::interference::cluster_order;

use crate::error::{LabError, Result};
use crate::manifest::RunManifest;
use crate::output::PlotSpec;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Parsed CSV: header plus string cells.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    fn column(&self, name: &str) -> std::result::Result<usize, String> {
        self.header.iter().position(|h| h == name).ok_or_else(|| format!("no column {name:?}"))
    }

    fn number(cell: &str) -> f64 {
        cell.trim().parse().unwrap_or(f64::NAN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

fn no_data(title: &str) -> String {
    let mut s = svg_open(title);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="gray">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(x: f64) -> String {
    if x == 0.0 || (1e-3..1e4).contains(&x.abs()) {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{x:.1e}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    Some(if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

/// Renders one artifact. Tables without rows draw a "no data" frame.
pub fn render(spec: &PlotSpec, csv_text: &str) -> std::result::Result<String, String> {
    let table = Table::parse(csv_text)?;
    match spec {
        PlotSpec::Line { title, x, y, series, log_y } => line(&table, title, x, y, series.as_deref(), *log_y),
        PlotSpec::Heat { title, row, col, value } => heat(&table, title, row, col, value),
        PlotSpec::Matrix { title, cluster } => matrix(&table, title, *cluster),
    }
}

fn line(t: &Table, title: &str, x: &str, ys: &[String], series: Option<&str>, log_y: bool) -> std::result::Result<String, String> {
    let xi = t.column(x)?;
    let yi: Vec<usize> = ys.iter().map(|y| t.column(y)).collect::<std::result::Result<_, _>>()?;
    let si = series.map(|s| t.column(s)).transpose()?;
    let ty = |v: f64| if log_y { if v > 0.0 { v.log10() } else { f64::NAN } } else { v };

    // (label, points) in first-appearance order
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in &t.rows {
        let xv = Table::number(&row[xi]);
        for (name, &c) in ys.iter().zip(&yi) {
            let label = match si {
                Some(s) if ys.len() > 1 => format!("{} {name}", row[s]),
                Some(s) => row[s].clone(),
                None => name.clone(),
            };
            let pos = match curves.iter().position(|(l, _)| *l == label) {
                Some(p) => p,
                None => {
                    curves.push((label, Vec::new()));
                    curves.len() - 1
                }
            };
            curves[pos].1.push((xv, ty(Table::number(&row[c]))));
        }
    }
    let points = || curves.iter().flat_map(|(_, p)| p.iter()).filter(|(a, b)| a.is_finite() && b.is_finite());
    let (Some((x0, x1)), Some((y0, y1))) = (range(points().map(|p| p.0)), range(points().map(|p| p.1))) else {
        return Ok(no_data(title));
    };
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let py = |v: f64| TOP + ph - (v - y0) / (y1 - y0) * ph;

    let mut s = svg_open(title);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylabel = fmt_tick(if log_y { 10f64.powf(yv) } else { yv });
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, px(xv), TOP + ph + 16.0, fmt_tick(xv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{ylabel}</text>"#, LEFT - 6.0, py(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(x));
    for (k, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for &(a, b) in pts {
            if a.is_finite() && b.is_finite() {
                let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, px(a), py(b));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5" shape-rendering="geometricPrecision"/>"#, d.trim_end());
        let ly = TOP + 14.0 * k as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, WIDTH - RIGHT + 10.0, WIDTH - RIGHT + 28.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, WIDTH - RIGHT + 32.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Blue-white-red for signed data, white-to-blue otherwise.
fn color(v: f64, lo: f64, hi: f64) -> String {
    if !v.is_finite() {
        return "#bbbbbb".into();
    }
    let mix = |a: [f64; 3], b: [f64; 3], f: f64| -> String {
        let c: Vec<u8> = (0..3).map(|i| (a[i] + (b[i] - a[i]) * f.clamp(0.0, 1.0)).round() as u8).collect();
        format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
    };
    let white = [255.0, 255.0, 255.0];
    let blue = [33.0, 102.0, 172.0];
    let red = [178.0, 24.0, 43.0];
    if lo < 0.0 && hi > 0.0 {
        let m = lo.abs().max(hi);
        if v < 0.0 { mix(white, blue, -v / m) } else { mix(white, red, v / m) }
    } else {
        mix(white, blue, (v - lo) / (hi - lo))
    }
}

/// Numeric labels are shortened for display.
fn short_label(s: &str) -> String {
    s.parse::<f64>().map_or_else(|_| s.to_string(), fmt_tick)
}

fn grid(title: &str, axes: (&str, &str), rows: &[String], cols: &[String], cell: impl Fn(usize, usize) -> f64) -> String {
    let values: Vec<f64> = (0..rows.len()).flat_map(|i| (0..cols.len()).map(move |j| (i, j))).map(|(i, j)| cell(i, j)).collect();
    let Some((lo, hi)) = range(values.iter().copied()) else {
        return no_data(title);
    };
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let (cw, ch) = (pw / cols.len() as f64, ph / rows.len() as f64);
    let mut s = svg_open(title);
    for i in 0..rows.len() {
        for j in 0..cols.len() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                LEFT + j as f64 * cw,
                TOP + i as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                color(cell(i, j), lo, hi)
            );
        }
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let label_every = |n: usize| n.div_ceil(10).max(1);
    for (i, r) in rows.iter().enumerate().step_by(label_every(rows.len())) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 4.0, TOP + (i as f64 + 0.5) * ch + 4.0, escape(&short_label(r)));
    }
    for (j, c) in cols.iter().enumerate().step_by(label_every(cols.len())) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + (j as f64 + 0.5) * cw, TOP + ph + 14.0, escape(&short_label(c)));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(axes.1));
    let _ = writeln!(s, r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, escape(axes.0));
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">min {}</text>"#, WIDTH - RIGHT + 10.0, TOP + 10.0, fmt_tick(lo));
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">max {}</text>"#, WIDTH - RIGHT + 10.0, TOP + 26.0, fmt_tick(hi));
    s.push_str("</svg>\n");
    s
}

fn heat(t: &Table, title: &str, row: &str, col: &str, value: &str) -> std::result::Result<String, String> {
    let (ri, ci, vi) = (t.column(row)?, t.column(col)?, t.column(value)?);
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut cells = BTreeMap::new();
    for r in &t.rows {
        for (list, key) in [(&mut rows, &r[ri]), (&mut cols, &r[ci])] {
            if !list.contains(key) {
                list.push(key.clone());
            }
        }
        cells.insert((r[ri].clone(), r[ci].clone()), Table::number(&r[vi]));
    }
    if rows.is_empty() {
        return Ok(no_data(title));
    }
    Ok(grid(title, (row, col), &rows, &cols, |i, j| cells.get(&(rows[i].clone(), cols[j].clone())).copied().unwrap_or(f64::NAN)))
}

fn matrix(t: &Table, title: &str, cluster: bool) -> std::result::Result<String, String> {
    let cols: Vec<usize> = (0..t.header.len())
        .filter(|&j| t.header[j].strip_prefix('c').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit())))
        .collect();
    if t.rows.is_empty() || cols.is_empty() {
        return Ok(no_data(title));
    }
    let m = DMatrix::from_fn(t.rows.len(), cols.len(), |i, j| Table::number(&t.rows[i][cols[j]]));
    let row_order: Vec<usize> = if cluster && m.iter().all(|v| v.is_finite()) { cluster_order(&m) } else { (0..m.nrows()).collect() };
    // square matrices get the same order on both axes
    let col_order: Vec<usize> = if m.is_square() { row_order.clone() } else { (0..m.ncols()).collect() };
    let rl: Vec<String> = row_order.iter().map(|i| i.to_string()).collect();
    let cl: Vec<String> = col_order.iter().map(|j| j.to_string()).collect();
    Ok(grid(title, ("probe", "probe"), &rl, &cl, |i, j| m[(row_order[i], col_order[j])]))
}

/// Path of the SVG drawn from a CSV artifact.
pub fn svg_path(csv_path: &str) -> String {
    match csv_path.strip_suffix(".csv") {
        Some(stem) => format!("{stem}.svg"),
        None => format!("{csv_path}.svg"),
    }
}

/// Re-renders every plotted artifact of a finished run. Returns the SVGs written.
pub fn emit_plots(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut written = Vec::new();
    for entry in &manifest.artifacts {
        let Some(spec) = &entry.plot else { continue };
        let path = dir.join(&entry.path);
        if !path.is_file() {
            return Err(LabError::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let svg = render(spec, &text).map_err(|message| LabError::Csv { path: path.clone(), message })?;
        let out = dir.join(svg_path(&entry.path));
        std::fs::write(&out, svg).map_err(|e| LabError::io(&out, e))?;
        written.push(out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_spec() -> PlotSpec {
        PlotSpec::Line { title: "t".into(), x: "a".into(), y: vec!["b".into()], series: None, log_y: true }
    }

    #[test]
    fn header_only_csv_draws_no_data() {
        let svg = render(&line_spec(), "a,b\n").unwrap();
        assert!(svg.contains("no data"));
        let heat = PlotSpec::Heat { title: "h".into(), row: "r".into(), col: "c".into(), value: "v".into() };
        assert!(render(&heat, "r,c,v\n").unwrap().contains("no data"));
        assert!(render(&PlotSpec::Matrix { title: "m".into(), cluster: true }, "probe,c0\n").unwrap().contains("no data"));
    }

    #[test]
    fn unknown_column_is_an_error() {
        let spec = PlotSpec::Line { title: "t".into(), x: "zz".into(), y: vec!["b".into()], series: None, log_y: false };
        assert!(render(&spec, "a,b\n1,2\n").unwrap_err().contains("zz"));
    }

    #[test]
    fn line_plot_has_one_path_per_series() {
        let spec = PlotSpec::Line { title: "t".into(), x: "a".into(), y: vec!["b".into()], series: Some("s".into()), log_y: false };
        let svg = render(&spec, "s,a,b\nx,0,1\nx,1,2\ny,0,3\ny,1,1\n").unwrap();
        assert_eq!(svg.matches("<path").count(), 2);
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = PlotSpec::Matrix { title: "m".into(), cluster: true };
        let csv = "probe,state_index,action,c0,c1,c2\n0,0,1,1.0,0.1,0.9\n1,1,0,0.1,1.0,0.2\n2,2,3,0.9,0.2,1.0\n";
        assert_eq!(render(&m, csv).unwrap(), render(&m, csv).unwrap());
        assert_eq!(render(&m, csv).unwrap().matches("<rect").count(), 2 + 9);
    }

    #[test]
    fn svg_paths_replace_extension() {
        assert_eq!(svg_path("seed-0/rank.csv"), "seed-0/rank.svg");
        assert_eq!(svg_path("x"), "x.svg");
    }
}
