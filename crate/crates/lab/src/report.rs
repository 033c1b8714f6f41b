//! Report emission: aggregate CSV, verdict JSON, and simple SVG line
//! charts (one curve per axis point, x = log2 of the hyperparameter,
//! y = final loss, diverged cells rendered as gaps). Everything is a
//! deterministic function of the trial log.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::runlog::TrialRecord;
use crate::LabError;

/// Aggregated cell: one (axis point, hp value) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub axis: String,
    pub axis_point: u64,
    pub hp_name: String,
    pub hp_value: f64,
    pub seed_mean_loss: Option<f64>,
    pub n_seeds: usize,
    pub diverged_count: usize,
}

/// Verdict block written alongside the CSV.
#[derive(Clone, Debug, Serialize)]
pub struct VerdictJson {
    pub axis: String,
    pub axis_points: Vec<u64>,
    pub argmin_indices: Vec<Option<usize>>,
    pub tolerance: usize,
    pub pass: bool,
    pub reason: Option<String>,
    pub warnings: Vec<String>,
}

/// The files produced for one log.
pub struct ReportBundle {
    pub csv_path: std::path::PathBuf,
    pub verdict_path: Option<std::path::PathBuf>,
    pub svg_path: Option<std::path::PathBuf>,
}

/// Aggregate records into seed-mean rows, ordered by (axis point, hp
/// name, hp value). A cell is diverged when any seed diverged.
pub fn aggregate(records: &[TrialRecord]) -> Vec<CsvRow> {
    let mut cells: BTreeMap<(String, u64, String, u64), (f64, usize, usize)> = BTreeMap::new();
    for r in records {
        for (hp_name, &hp_value) in &r.hps {
            let key = (r.axis.clone(), r.axis_point, hp_name.clone(), hp_value.to_bits());
            let cell = cells.entry(key).or_insert((0.0, 0, 0));
            cell.1 += 1;
            if r.diverged {
                cell.2 += 1;
            } else {
                cell.0 += r.final_loss.unwrap_or(f64::INFINITY);
            }
        }
    }
    cells
        .into_iter()
        .map(|((axis, axis_point, hp_name, bits), (sum, n, div))| CsvRow {
            axis,
            axis_point,
            hp_name,
            hp_value: f64::from_bits(bits),
            seed_mean_loss: if div > 0 { None } else { Some(sum / n as f64) },
            n_seeds: n,
            diverged_count: div,
        })
        .collect()
}

fn format_loss(loss: Option<f64>) -> String {
    match loss {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

/// Render the summary CSV.
pub fn csv_text(rows: &[CsvRow]) -> String {
    let mut out = String::from("axis,hp_name,hp_value,seed_mean_loss,n_seeds,diverged_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis_point,
            r.hp_name,
            r.hp_value,
            format_loss(r.seed_mean_loss),
            r.n_seeds,
            r.diverged_count
        ));
    }
    out
}

/// Render the loss-vs-hp chart: one polyline per axis point; diverged
/// cells break the line.
pub fn svg_text(rows: &[CsvRow]) -> Option<String> {
    // group by axis point
    let mut by_point: BTreeMap<u64, Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        by_point.entry(r.axis_point).or_default().push(r);
    }
    let max_values = by_point.values().map(|v| v.len()).max().unwrap_or(0);
    if max_values < 2 {
        return None;
    }

    let (w, h, ml, mb) = (640.0f64, 420.0f64, 60.0f64, 40.0f64);
    let plot_w = w - ml - 20.0;
    let plot_h = h - mb - 20.0;

    // data ranges over finite cells
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in rows {
        xs.push(r.hp_value.log2());
        if let Some(loss) = r.seed_mean_loss {
            if loss.is_finite() {
                ys.push(loss);
            }
        }
    }
    let (xmin, xmax) = bounds(&xs);
    let (ymin, ymax) = if ys.is_empty() { (0.0, 1.0) } else { bounds(&ys) };
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let px = |x: f64| ml + (x - xmin) / xspan * plot_w;
    let py = |y: f64| 20.0 + (1.0 - (y - ymin) / yspan) * plot_h;

    let palette = ["#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#d68910", "#17a589"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<g stroke=\"#444\" stroke-width=\"1\">\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n",
        20.0 + plot_h,
        ml + plot_w,
        20.0 + plot_h
    ));
    svg.push_str(&format!("<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\"/>\n", 20.0 + plot_h));
    svg.push_str("</g>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">log2(hp value)</text>\n",
        ml + plot_w / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">final loss</text>\n",
        20.0 + plot_h / 2.0,
        20.0 + plot_h / 2.0
    ));

    for (ci, (point, cells)) in by_point.iter().enumerate() {
        let color = palette[ci % palette.len()];
        let mut cells = cells.clone();
        cells.sort_by(|a, b| a.hp_value.partial_cmp(&b.hp_value).unwrap());
        // split into segments at diverged gaps
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for c in cells {
            match c.seed_mean_loss {
                Some(loss) if loss.is_finite() => {
                    segments.last_mut().unwrap().push((px(c.hp_value.log2()), py(loss)))
                }
                _ => {
                    if !segments.last().unwrap().is_empty() {
                        segments.push(Vec::new());
                    }
                }
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x},{y}")).collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            for (x, y) in seg {
                svg.push_str(&format!("<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>\n"));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">axis {point}</text>\n",
            ml + plot_w - 70.0,
            32.0 + 16.0 * ci as f64
        ));
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Emit CSV (always), verdict JSON (when given), and SVG (when at least
/// two hp values exist per axis point) into `out_dir`.
pub fn emit_report(
    records: &[TrialRecord],
    verdict: Option<&VerdictJson>,
    out_dir: &Path,
) -> Result<ReportBundle, LabError> {
    if records.is_empty() {
        return Err(LabError::Config("empty trial log; nothing to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let rows = aggregate(records);
    let csv_path = out_dir.join("summary.csv");
    fs::write(&csv_path, csv_text(&rows))?;

    let verdict_path = match verdict {
        Some(v) => {
            let path = out_dir.join("verdict.json");
            let json = serde_json::to_string_pretty(v)
                .map_err(|e| LabError::Runtime(format!("verdict serialization failed: {e}")))?;
            fs::write(&path, json + "\n")?;
            Some(path)
        }
        None => None,
    };

    let svg_path = match svg_text(&rows) {
        Some(svg) => {
            let path = out_dir.join("loss_vs_hp.svg");
            fs::write(&path, svg)?;
            Some(path)
        }
        None => None,
    };

    Ok(ReportBundle { csv_path, verdict_path, svg_path })
}
