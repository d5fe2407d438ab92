//! Report files: structured JSON and CSV tables for plotting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{HarnessError, StreamReport, StreamRun};
use crate::engine::write_results;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    /// One JSON document holding the full report.
    Json,
    /// `curve.csv`, `histogram.csv` and `trajectory.csv` in a directory.
    Csv,
}

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Serializes a report to JSON bytes. Equal reports give equal bytes.
pub fn report_json(report: &StreamReport) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
    out.push(b'\n');
    out
}

/// Writes `report` to `path`: a file for [`ReportFormat::Json`], a directory
/// (created if missing) for [`ReportFormat::Csv`].
pub fn emit_report(
    report: &StreamReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    match format {
        ReportFormat::Json => std::fs::write(path, report_json(report)).map_err(io_err(path)),
        ReportFormat::Csv => {
            std::fs::create_dir_all(path).map_err(io_err(path))?;
            write_csv(&path.join(CURVE_FILE), curve_rows(report))?;
            write_csv(&path.join(HISTOGRAM_FILE), report.histogram.iter().cloned())?;
            write_csv(&path.join(TRAJECTORY_FILE), trajectory_rows(report))
        }
    }
}

pub fn parse_report(path: &Path) -> Result<StreamReport, HarnessError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct CurveRow {
    index: usize,
    accuracy: f64,
}

fn curve_rows(report: &StreamReport) -> impl Iterator<Item = CurveRow> + '_ {
    report
        .accuracy_curve
        .iter()
        .enumerate()
        .map(|(i, &accuracy)| CurveRow {
            index: i + 1,
            accuracy,
        })
}

/// Wide rows: `step, loss, tau_1 .. tau_K`.
fn trajectory_rows(report: &StreamReport) -> impl Iterator<Item = Vec<String>> + '_ {
    let k = report.final_taus.len();
    let header = ["step".to_string(), "loss".to_string()]
        .into_iter()
        .chain((1..=k).map(|i| format!("tau_{i}")))
        .collect::<Vec<_>>();
    std::iter::once(header).chain(report.trajectory.iter().map(|u| {
        [u.step.to_string(), u.loss.to_string()]
            .into_iter()
            .chain(u.taus.iter().map(|t| t.to_string()))
            .collect()
    }))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), HarnessError> {
    let fmt = |e: csv::Error| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(fmt)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes every artifact of a run into `dir`: the JSON report, CSV tables,
/// per-query results, the threshold trajectory and fitted calibrators.
pub fn write_run(run: &StreamRun, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report = dir.join(REPORT_FILE);
    emit_report(&run.report, ReportFormat::Json, &report)?;
    emit_report(&run.report, ReportFormat::Csv, dir)?;

    let results = dir.join("results.jsonl");
    let mut w = create(&results)?;
    write_results(&mut w, &run.results).map_err(io_err(&results))?;
    w.flush().map_err(io_err(&results))?;

    let thresholds = dir.join("thresholds.jsonl");
    let mut w = create(&thresholds)?;
    for u in &run.report.trajectory {
        serde_json::to_writer(&mut w, u).map_err(|e| HarnessError::Format {
            path: thresholds.clone(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(&thresholds))?;
    }
    w.flush().map_err(io_err(&thresholds))?;

    let calibrators = dir.join("calibrators.json");
    run.calibrators
        .save(&calibrators)
        .map_err(io_err(&calibrators))?;
    Ok(vec![report, results, thresholds, calibrators])
}
