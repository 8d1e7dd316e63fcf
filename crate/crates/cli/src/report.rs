//! Cross-run summary table and BLEU plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdrformer::metrics::{imi, MetricSeries};

use crate::{CliError, MetricsRow, RunManifest, MANIFEST_FILE, METRICS_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub id: String,
    pub variant: String,
    pub s: f64,
    pub q_att: usize,
    pub q_bo: usize,
    pub best_bleu: Option<f64>,
    pub imi: Option<f64>,
    /// `(epoch, bleu)` of the split the row summarises.
    pub curve: Vec<(u64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    id: String,
    variant: String,
    s: f64,
    q_att: usize,
    q_bo: usize,
    best_bleu: Option<f64>,
    imi: Option<f64>,
}

fn is_run(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
}

/// Run directories named directly or found one level below each path.
pub fn find_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut runs = Vec::new();
    for p in paths {
        if is_run(p) {
            runs.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| is_run(d))
            .collect();
        found.sort();
        runs.extend(found);
    }
    if runs.is_empty() {
        return Err(CliError::Runtime("no run directories found".into()));
    }
    Ok(runs)
}

pub fn summarise(dir: &Path) -> Result<RunSummary, CliError> {
    let rt = |m: String| CliError::Runtime(m);
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| rt(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| rt(format!("invalid manifest in {}: {e}", dir.display())))?;
    let mut reader = csv::Reader::from_path(dir.join(METRICS_FILE))
        .map_err(|e| rt(format!("cannot read metrics in {}: {e}", dir.display())))?;
    let rows: Vec<MetricsRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| rt(format!("invalid metrics in {}: {e}", dir.display())))?;
    let has_val = rows.iter().any(|r| r.split == "val");
    let split = if has_val { "val" } else { "train" };
    let curve: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch, r.bleu))
        .collect();
    let values: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let series = MetricSeries::new(values).map_err(|e| rt(format!("{}: {e}", dir.display())))?;
    let e = &manifest.config.experiment;
    Ok(RunSummary {
        id: manifest.experiment_id.clone(),
        variant: e.variant.to_string(),
        s: e.s,
        q_att: e.q_att,
        q_bo: e.q_bo,
        best_bleu: series.max(),
        imi: imi(&series).ok(),
        curve,
    })
}

pub fn write_csv(runs: &[RunSummary], path: &Path) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in runs {
        w.serialize(ReportRow {
            id: r.id.clone(),
            variant: r.variant.clone(),
            s: r.s,
            q_att: r.q_att,
            q_bo: r.q_bo,
            best_bleu: r.best_bleu,
            imi: r.imi,
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Per-epoch BLEU, one polyline and legend entry per run.
pub fn render_svg(runs: &[RunSummary]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (56.0, 170.0, 20.0, 44.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_epoch = runs
        .iter()
        .flat_map(|r| r.curve.iter().map(|c| c.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |e: u64| left + pw * e as f64 / max_epoch;
    let y = |b: f64| top + ph * (1.0 - b.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let b = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{b:.2}</text>"#,
            left - 6.0,
            y(b) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
        left + pw,
        top + ph + 16.0,
        max_epoch
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">BLEU</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, r) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = r.curve.iter().map(|&(e, b)| format!("{:.1},{:.1}", x(e), y(b))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{:.1}" y="{ly:.1}">{}</text>"#,
            lx + 26.0,
            escape(&r.id)
        );
    }
    s.push_str("</svg>\n");
    s
}
