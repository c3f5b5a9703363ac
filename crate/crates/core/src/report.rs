//! Matrix CSV files and their rendering as SVG heatmaps and a text summary.
//!
//! Heatmap colour scale: a metric of 0 is dark, 1 is light. The fill is a
//! linear blend from `#181040` to `#faf0b4`; every channel increases with
//! the metric, so brighter always means better.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MATRIX_HEADER: &str = "theta_y,unbalance,mean,std,runs,chosen";
pub const DARK: [u8; 3] = [0x18, 0x10, 0x40];
pub const LIGHT: [u8; 3] = [0xfa, 0xf0, 0xb4];

/// One cell of a (method, group) matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    /// `None` for real-world data.
    pub theta_y: Option<f64>,
    pub unbalance: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    /// Selected hyperparameters, `name=value` joined by `;`.
    pub chosen: String,
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn matrix_csv(rows: &[MatrixRow]) -> String {
    let mut out = String::from(MATRIX_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_opt(r.theta_y),
            r.unbalance,
            r.mean,
            r.std,
            r.runs,
            r.chosen
        );
    }
    out
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<MatrixRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != MATRIX_HEADER {
        return Err(Error::Parse {
            row: 0,
            column: "header".into(),
            message: format!("{} is not a result matrix (expected `{MATRIX_HEADER}`)", path.display()),
        });
    }
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let num = |c: usize| -> Result<f64> {
            record[c].parse().map_err(|_| Error::Parse {
                row,
                column: header[c].clone(),
                message: format!("`{}` is not a number", &record[c]),
            })
        };
        rows.push(MatrixRow {
            theta_y: if record[0].is_empty() { None } else { Some(num(0)?) },
            unbalance: num(1)?,
            mean: num(2)?,
            std: num(3)?,
            runs: num(4)? as usize,
            chosen: record[5].to_string(),
        });
    }
    Ok(rows)
}

/// Fill colour of a metric value, clamped to [0, 1].
pub fn color(value: f64) -> [u8; 3] {
    let t = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let (a, b) = (f64::from(DARK[c]), f64::from(LIGHT[c]));
        rgb[c] = (a + (b - a) * t).round() as u8;
    }
    rgb
}

fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

fn label(v: Option<f64>) -> String {
    v.map_or_else(|| "data".to_string(), |v| v.to_string())
}

/// Complexity (θ_Y) on the vertical axis, unbalance increasing to the right.
pub fn heatmap_svg(title: &str, rows: &[MatrixRow]) -> String {
    let mut thetas: Vec<Option<f64>> = Vec::new();
    let mut unbalances: Vec<f64> = Vec::new();
    for r in rows {
        if !thetas.contains(&r.theta_y) {
            thetas.push(r.theta_y);
        }
        if !unbalances.contains(&r.unbalance) {
            unbalances.push(r.unbalance);
        }
    }
    thetas.sort_by(|a, b| a.unwrap_or(0.0).total_cmp(&b.unwrap_or(0.0)));
    unbalances.sort_by(f64::total_cmp);

    let (cw, ch, left, top) = (64.0, 40.0, 80.0, 50.0);
    let grid_w = cw * unbalances.len() as f64;
    let grid_h = ch * thetas.len() as f64;
    let width = left + grid_w + 110.0;
    let height = top + grid_h + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<g id="cells">"#);
    for r in rows {
        let col = unbalances.iter().position(|&u| u == r.unbalance).expect("collected");
        let row = thetas.iter().position(|&t| t == r.theta_y).expect("collected");
        let (x, y) = (left + cw * col as f64, top + ch * row as f64);
        let fill = color(r.mean);
        let ink = if r.mean < 0.5 { "#ffffff" } else { "#000000" };
        let _ = writeln!(
            s,
            r#"<rect class="cell" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}" data-mean="{}"/>"#,
            hex(fill),
            r.mean
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}±{:.2}</text>"#,
            x + cw / 2.0,
            y + ch / 2.0 + 4.0,
            r.mean,
            r.std
        );
    }
    let _ = writeln!(s, "</g>");
    for (i, u) in unbalances.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{u}</text>"#,
            left + cw * (i as f64 + 0.5),
            top + grid_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">unbalance</text>"#,
        left + grid_w / 2.0,
        top + grid_h + 34.0
    );
    for (i, t) in thetas.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 8.0,
            top + ch * (i as f64 + 0.5) + 4.0,
            label(*t)
        );
    }
    let _ = writeln!(s, r#"<text x="10" y="{}">theta_y</text>"#, top - 8.0);

    // Legend: eleven steps from 0 (dark) to 1 (light).
    let lx = left + grid_w + 30.0;
    let _ = writeln!(s, r#"<g id="legend">"#);
    for k in 0..=10 {
        let v = 1.0 - k as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="18" height="10" fill="{}"/>"#,
            top + 10.0 * k as f64,
            hex(color(v))
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">1</text>"#, lx + 24.0, top + 9.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">0</text>"#, lx + 24.0, top + 109.0);
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Matrix files of a results directory as `(method, group, path)`, sorted.
pub fn matrix_files(dir: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_prefix("matrix_").and_then(|n| n.strip_suffix(".csv")) else {
            continue;
        };
        if let Some((method, group)) = stem.rsplit_once('_') {
            found.push((method.to_string(), group.to_string(), path.clone()));
        }
    }
    found.sort();
    Ok(found)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Refused {
            path: path.to_path_buf(),
            reason: "file exists (pass --force to overwrite)".into(),
        });
    }
    Ok(())
}

/// Writes `heatmap_<method>_<group>.svg`, `summary.txt` and, when gap
/// tables are present, `gap_plot.csv` into `out`. Returns written paths.
pub fn write_report(results: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let matrices = matrix_files(results)?;
    if matrices.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no matrix_<method>_<group>.csv files in {}",
            results.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    let mut planned: Vec<(PathBuf, String)> = Vec::new();
    let mut summary = String::from("method   group   theta_y  unbalance  mean    std     chosen\n");
    for (method, group, path) in &matrices {
        let rows = read_matrix_csv(path)?;
        let svg = heatmap_svg(&format!("{method} {group}"), &rows);
        planned.push((out.join(format!("heatmap_{method}_{group}.svg")), svg));
        for r in &rows {
            let _ = writeln!(
                summary,
                "{method:<8} {group:<7} {:<8} {:<10} {:<7.4} {:<7.4} {}",
                label(r.theta_y),
                r.unbalance,
                r.mean,
                r.std,
                r.chosen
            );
        }
    }
    planned.push((out.join("summary.txt"), summary));

    let mut gaps = Vec::new();
    for entry in std::fs::read_dir(results)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if let Some(method) = name.strip_prefix("gaps_").and_then(|n| n.strip_suffix(".csv")) {
            gaps.push((method.to_string(), path));
        }
    }
    gaps.sort();
    if !gaps.is_empty() {
        let mut plot = String::from("method,theta_y,unbalance,fpr_gap,fnr_gap\n");
        for (method, path) in &gaps {
            let text = std::fs::read_to_string(path)?;
            for line in text.lines().skip(1) {
                let _ = writeln!(plot, "{method},{line}");
            }
        }
        planned.push((out.join("gap_plot.csv"), plot));
    }

    for (path, _) in &planned {
        refuse_existing(path, force)?;
    }
    for (path, text) in &planned {
        std::fs::write(path, text)?;
    }
    Ok(planned.into_iter().map(|(p, _)| p).collect())
}
