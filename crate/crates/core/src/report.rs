//! Report generation from finished experiment directories: a results table
//! (markdown and CSV), loss curves, and an index of the figures each run left
//! behind, each traced to its seed and checkpoint digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Domain, ExperimentManifest, RunStatus, Stage};

/// Tiles equally shaped CHW images row-major with `pad` pixels of white
/// between cells. Single-channel images are replicated to gray.
pub fn image_grid(rows: &[Vec<&[u8]>], shape: [usize; 3], pad: u32) -> Result<RgbImage> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("grid cells need 1 or 3 channels, got {c}")));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (h32, w32) = (h as u32, w as u32);
    let width = cols * w32 + (cols + 1) * pad;
    let height = rows.len() as u32 * h32 + (rows.len() as u32 + 1) * pad;
    let mut img = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (col, cell) in row.iter().enumerate() {
            if cell.len() != c * h * w {
                return Err(Error::Shape(format!("grid cell has {} bytes, expected {}", cell.len(), c * h * w)));
            }
            let x0 = pad + col as u32 * (w32 + pad);
            let y0 = pad + r as u32 * (h32 + pad);
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| cell[ch * h * w + y * w + x];
                    let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                    img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

/// Human label of a stage list, matching the usual rows of a results table.
pub fn method_label(stages: &[Stage], source_domain: Domain) -> Option<&'static str> {
    use Stage::*;
    match (stages, source_domain) {
        ([SourcePretrain], Domain::Source) => Some("Source only"),
        ([SourcePretrain], Domain::Target) => Some("Target only"),
        ([SourcePretrain, PixelAdapt, TaskOnTranslated], Domain::Source) => Some("CyCADA pixel only"),
        ([SourcePretrain, FeatureAdapt], Domain::Source) => Some("CyCADA feat only"),
        ([SourcePretrain, PixelAdapt, TaskOnTranslated, FeatureAdapt], Domain::Source) => Some("CyCADA pixel+feat"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub shift: String,
    pub method: String,
    pub mean: f64,
    /// Empty when fewer than two runs completed.
    pub stderr: Option<f64>,
    pub runs: usize,
}

impl ResultRow {
    pub fn from_manifest(m: &ExperimentManifest) -> Option<Self> {
        let agg = m.recompute_aggregate()?;
        let domain = m
            .config
            .stages
            .get(Stage::SourcePretrain.name())
            .map(|s| s.train_domain)
            .unwrap_or(Domain::Source);
        let method = if m.method.is_empty() {
            method_label(&m.config.experiment.stages, domain).unwrap_or("custom").to_string()
        } else {
            m.method.clone()
        };
        Some(Self { shift: m.shift.clone(), method, mean: agg.mean, stderr: agg.stderr, runs: agg.runs })
    }
}

/// Every `manifest.toml` at most two levels below `root`, sorted by path.
pub fn find_manifests(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
        let direct = dir.join(ExperimentManifest::FILE);
        if direct.is_file() {
            out.push(direct);
            return Ok(());
        }
        if depth == 0 {
            return Ok(());
        }
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, depth - 1, out)?;
            }
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(Error::Report(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    walk(root, 2, &mut out)?;
    out.sort();
    Ok(out)
}

fn method_order(method: &str) -> usize {
    ["Source only", "CyCADA pixel only", "CyCADA feat only", "CyCADA pixel+feat", "Target only"]
        .iter()
        .position(|m| *m == method)
        .unwrap_or(usize::MAX)
}

/// Rows sorted by shift, then in the conventional method order.
pub fn result_rows(manifests: &[ExperimentManifest]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = manifests.iter().filter_map(ResultRow::from_manifest).collect();
    rows.sort_by(|a, b| {
        (a.shift.as_str(), method_order(&a.method), a.method.as_str()).cmp(&(
            b.shift.as_str(),
            method_order(&b.method),
            b.method.as_str(),
        ))
    });
    rows
}

pub fn markdown_table(rows: &[ResultRow]) -> String {
    let mut s = String::from("| shift | method | mean accuracy | stderr |\n|---|---|---|---|\n");
    for r in rows {
        let se = r.stderr.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "| {} | {} | {:.2} | {} |", r.shift, r.method, 100.0 * r.mean, se);
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    shift: String,
    method: String,
    mean: f64,
    stderr: Option<f64>,
    runs: usize,
}

/// CSV with full-precision fractions so it re-parses to the same numbers.
pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
    for r in rows {
        w.serialize(CsvRow {
            shift: r.shift.clone(),
            method: r.method.clone(),
            mean: r.mean,
            stderr: r.stderr,
            runs: r.runs,
        })
        .map_err(|e| Error::Report(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::Report(e.to_string()))?;
            Ok(ResultRow { shift: row.shift, method: row.method, mean: row.mean, stderr: row.stderr, runs: row.runs })
        })
        .collect()
}

const CURVE_COLORS: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// Plots each loss term of a `losses.csv` as a min-max normalized polyline.
/// Returns the terms in legend (color) order.
pub fn plot_loss_curves(losses_csv: &Path, out: &Path) -> Result<Vec<String>> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut r = csv::Reader::from_path(losses_csv).map_err(|e| Error::Report(e.to_string()))?;
    for rec in r.deserialize::<crate::trainer::LossRecord>() {
        let rec = rec.map_err(|e| Error::Report(e.to_string()))?;
        series.entry(rec.term).or_default().push((rec.iteration as f64, rec.value));
    }
    let (w, h, m) = (480u32, 240u32, 10u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let max_it = series.values().flatten().map(|p| p.0).fold(1.0f64, f64::max);
    for (k, pts) in series.values().enumerate() {
        let color = Rgb(CURVE_COLORS[k % CURVE_COLORS.len()]);
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let to_px = |(it, v): (f64, f64)| {
            let x = m as f64 + it / max_it * (w - 2 * m) as f64;
            let y = (h - m) as f64 - (v - lo) / span * (h - 2 * m) as f64;
            (x, y)
        };
        for pair in pts.windows(2) {
            let (a, b) = (to_px(pair[0]), to_px(pair[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(out)?;
    Ok(series.into_keys().collect())
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub rows: Vec<ResultRow>,
    pub markdown: PathBuf,
    pub csv: PathBuf,
    pub figures: Vec<PathBuf>,
}

/// Builds the report for every completed experiment below `from` into `out`.
pub fn emit_report(from: &Path, out: &Path) -> Result<ReportBundle> {
    let mut manifests = Vec::new();
    for path in find_manifests(from)? {
        let m = ExperimentManifest::read(&path)?;
        if m.runs.iter().any(|r| r.status == RunStatus::Completed) {
            manifests.push((path, m));
        }
    }
    if manifests.is_empty() {
        return Err(Error::Report(format!("no completed runs under {}", from.display())));
    }
    fs::create_dir_all(out)?;
    let rows = result_rows(&manifests.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());

    let mut md = String::from("# Results\n\n");
    md.push_str(&markdown_table(&rows));
    md.push_str("\nMean over completed seeds, in percent; stderr is the sample standard deviation over sqrt(runs).\n");
    md.push_str("\n# Figures\n");
    let mut figures = Vec::new();
    for (path, m) in &manifests {
        let exp_dir = path.parent().unwrap_or(Path::new("."));
        let _ = writeln!(md, "\n## {} ({}, {})\n", m.id, m.shift, m.method);
        for run in m.runs.iter().filter(|r| r.status == RunStatus::Completed) {
            let run_dir = exp_dir.join(crate::trainer::run_dir_name(run.seed));
            for st in &run.stages {
                let stage_dir = run_dir.join(st.stage.name());
                let digests: Vec<String> = st.checkpoints.iter().map(|(k, v)| format!("{k}={}", &v[..v.len().min(12)])).collect();
                let _ = writeln!(md, "- seed {} / {}: checkpoints {}", run.seed, st.stage.name(), digests.join(", "));
                let losses = stage_dir.join("losses.csv");
                if losses.is_file() {
                    let fig = out.join(format!("{}-seed{}-{}-losses.png", m.id, run.seed, st.stage.name()));
                    let terms = plot_loss_curves(&losses, &fig)?;
                    let _ = writeln!(md, "  - loss curves `{}` (terms in color order: {})", file_name(&fig), terms.join(", "));
                    figures.push(fig);
                }
                let heat = stage_dir.join("confusion.png");
                if heat.is_file() {
                    let _ = writeln!(md, "  - confusion heatmap `{}`", heat.display());
                    figures.push(heat);
                }
                let triples = stage_dir.join("triples");
                if triples.is_dir() {
                    let mut grids: Vec<PathBuf> = fs::read_dir(&triples)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
                    grids.sort();
                    if let Some(last) = grids.iter().rev().find(|p| p.extension().is_some_and(|e| e == "png")) {
                        let _ = writeln!(
                            md,
                            "  - translation triples `{}` (each row: original | translated | reconstructed)",
                            last.display()
                        );
                        figures.push(last.clone());
                    }
                }
            }
        }
    }
    let markdown = out.join("report.md");
    fs::write(&markdown, md)?;
    let csv = out.join("results.csv");
    write_csv(&rows, &csv)?;
    Ok(ReportBundle { rows, markdown, csv, figures })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
