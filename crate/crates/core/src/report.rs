//! Static report artifacts: loss curves, TTA curves and method comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::MetricsTable;
use crate::trainer::LogRow;

pub const TTA_TRACE_FILE: &str = "tta_trace.csv";
pub const TTA_SUMMARY_FILE: &str = "tta_summary.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_INFO_FILE: &str = "eval_info.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub video: String,
    pub iteration: usize,
    pub visible_iou: f64,
    pub occluded_miou: f64,
    pub full_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaSummaryRow {
    pub video: String,
    pub iterations: usize,
    pub stop_reason: String,
    pub before_full: f64,
    pub before_occluded: f64,
    pub after_full: f64,
    pub after_occluded: f64,
}

/// Who produced a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInfo {
    pub method: String,
    pub data: String,
    pub checkpoint: Option<String>,
    pub filter: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub source: String,
    pub full_miou: f64,
    pub occluded_miou: f64,
    pub n_objects: usize,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::format(path, format!("cannot draw plot: {e}"))
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

type Column = fn(&LogRow) -> f64;

/// Total, mask and consistency loss against step.
pub fn plot_loss_curve(rows: &[LogRow], path: &Path) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let x_max = rows.iter().map(|r| r.step).max().unwrap_or(1) as f64;
    let (y0, y1) = range_of(rows.iter().flat_map(|r| [r.total, r.l_m, r.l_c]));
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, y0..y1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(&err)?;
    let series: [(&str, RGBColor, Column); 3] = [
        ("total", BLACK, |r| r.total),
        ("l_m", BLUE, |r| r.l_m),
        ("l_c", RED, |r| r.l_c),
    ];
    for (name, color, get) in series {
        chart
            .draw_series(LineSeries::new(
                rows.iter().map(|r| (r.step as f64, get(r))),
                color,
            ))
            .map_err(&err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Visible and occluded IoU against TTA iteration, one pair of lines per video, with
/// a marker at each video's stopping iteration.
pub fn plot_tta_curves(rows: &[TraceRow], path: &Path) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let x_max = rows.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let (y0, y1) = range_of(rows.iter().flat_map(|r| [r.visible_iou, r.occluded_miou]));
    let mut chart = ChartBuilder::on(&root)
        .caption("test-time adaptation", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, y0.max(0.0)..y1.min(1.0).max(y0 + 1e-3))
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("IoU")
        .draw()
        .map_err(&err)?;
    let mut videos: Vec<&str> = rows.iter().map(|r| r.video.as_str()).collect();
    videos.dedup();
    for (i, v) in videos.iter().enumerate() {
        let trace: Vec<&TraceRow> = rows.iter().filter(|r| r.video == *v).collect();
        for (get, color, name) in [
            (
                (|r: &TraceRow| r.visible_iou) as fn(&TraceRow) -> f64,
                BLUE,
                "visible",
            ),
            (|r: &TraceRow| r.occluded_miou, RED, "occluded"),
        ] {
            let s = chart
                .draw_series(LineSeries::new(
                    trace.iter().map(|r| (r.iteration as f64, get(r))),
                    color.mix(0.6),
                ))
                .map_err(&err)?;
            if i == 0 {
                s.label(name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
            }
            if let Some(last) = trace.last() {
                chart
                    .draw_series(std::iter::once(Circle::new(
                        (last.iteration as f64, get(last)),
                        3,
                        color.filled(),
                    )))
                    .map_err(&err)?;
            }
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>10} {:>10} {:>9}  source",
        "method", "full", "occluded", "objects"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>10.4} {:>9}  {}",
            r.method, r.full_miou, r.occluded_miou, r.n_objects, r.source
        );
    }
    s
}

fn stem(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

/// Emits every artifact the run directories support into `out`; returns the files written.
pub fn build_report(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut comparison = Vec::new();
    for dir in runs {
        let name = stem(dir);
        let log = dir.join(crate::trainer::LOG_FILE);
        if log.exists() {
            let rows: Vec<LogRow> = read_csv(&log)?;
            if rows.is_empty() {
                log::warn!("{} is empty, skipping its loss curve", log.display());
            } else {
                let p = out.join(format!("loss_{name}.svg"));
                plot_loss_curve(&rows, &p)?;
                written.push(p);
            }
        }
        let trace = dir.join(TTA_TRACE_FILE);
        if trace.exists() {
            let rows: Vec<TraceRow> = read_csv(&trace)?;
            if rows.is_empty() {
                log::warn!("{} is empty, skipping its TTA curve", trace.display());
            } else {
                let p = out.join(format!("tta_{name}.svg"));
                plot_tta_curves(&rows, &p)?;
                written.push(p);
            }
        }
        let metrics = dir.join(METRICS_FILE);
        if metrics.exists() {
            let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
            let table: MetricsTable =
                serde_json::from_str(&text).map_err(|e| Error::format(&metrics, e.to_string()))?;
            let info_path = dir.join(EVAL_INFO_FILE);
            let method = match fs::read_to_string(&info_path) {
                Ok(t) => {
                    serde_json::from_str::<EvalInfo>(&t)
                        .map_err(|e| Error::format(&info_path, e.to_string()))?
                        .method
                }
                Err(_) => name.clone(),
            };
            comparison.push(ComparisonRow {
                method,
                source: dir.display().to_string(),
                full_miou: table.full_miou,
                occluded_miou: table.occluded_miou,
                n_objects: table.n_objects,
            });
        }
    }
    if !comparison.is_empty() {
        let csv_path = out.join("comparison.csv");
        write_csv(&csv_path, &comparison)?;
        let txt_path = out.join("comparison.txt");
        fs::write(&txt_path, comparison_text(&comparison)).map_err(|e| Error::io(&txt_path, e))?;
        written.push(csv_path);
        written.push(txt_path);
    }
    if written.is_empty() {
        log::warn!("no logs or metrics found in the given run directories");
    }
    Ok(written)
}
