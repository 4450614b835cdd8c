//! Experiment reports and their table renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::meta::TrainTrace;

pub const REPORT_FORMAT: &str = "fmaml-report-v1";

/// Rendered in place of a failed or missing cell.
pub const MISSING: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One (method, K) entry of the result grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub k_shot: usize,
    pub status: CellStatus,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub trials: Vec<f64>,
    pub error: Option<String>,
}

impl CellReport {
    pub fn ok(method: Method, k_shot: usize, r: crate::meta::ProtocolReport) -> Self {
        CellReport { method, k_shot, status: CellStatus::Ok, mean: Some(r.mean), std: Some(r.std), trials: r.trials, error: None }
    }

    pub fn failed(method: Method, k_shot: usize, error: impl Into<String>) -> Self {
        CellReport { method, k_shot, status: CellStatus::Failed, mean: None, std: None, trials: vec![], error: Some(error.into()) }
    }
}

/// One row of a convergence trace (wall-clock time lives in [`Timing`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub meta_loss: f64,
    pub query_acc: f64,
}

pub fn trace_points(t: &TrainTrace) -> Vec<TracePoint> {
    t.rows.iter().map(|r| TracePoint { iter: r.iter, meta_loss: r.meta_loss, query_acc: r.query_acc }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub config_hash: String,
    pub corpus_fingerprint: String,
    pub target_language: String,
    pub source_languages: Vec<String>,
    pub meta_iters: usize,
    pub notes: Vec<String>,
    pub version: String,
}

/// Everything that legitimately differs between identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Seconds per stage (`corpus`, `train/<method>`, `protocol/<method>/<K>`).
    pub stages: BTreeMap<String, f64>,
    /// Mean milliseconds per meta-iteration, per method.
    pub mean_iter_ms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub metadata: Metadata,
    pub config: ExperimentConfig,
    pub cells: Vec<CellReport>,
    pub traces: BTreeMap<String, Vec<TracePoint>>,
    pub timing: Timing,
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, k: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.k_shot == k)
    }

    /// Mean accuracy of a completed cell.
    pub fn mean(&self, method: Method, k: usize) -> Option<f64> {
        self.cell(method, k).filter(|c| c.status == CellStatus::Ok).and_then(|c| c.mean)
    }

    /// JSON with the timing section blanked: identical runs give identical bytes.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timing = Timing::default();
        Ok(serde_json::to_string_pretty(&r)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let r: ExperimentReport = serde_json::from_str(&text)?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Report(format!("{}: unknown format {}", path.display(), r.format)));
        }
        Ok(r)
    }

    fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.cells.iter().map(|c| c.method).collect();
        m.sort();
        m.dedup();
        m
    }

    fn ks(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.cells.iter().map(|c| c.k_shot).collect();
        k.sort();
        k.dedup();
        k
    }
}

pub fn percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn percent_cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Text table and CSV: one row per method, one column per K. Percentages
/// carry two decimals; failed cells show [`MISSING`].
pub fn emit_tables(report: &ExperimentReport) -> Result<(String, String)> {
    if !report.cells.iter().any(|c| c.status == CellStatus::Ok) {
        return Err(Error::Report("no completed cells to tabulate".into()));
    }
    let ks = report.ks();
    let mut headers = vec!["model".to_string()];
    for k in &ks {
        headers.push(format!("{k}-shot"));
        headers.push(format!("{k}-shot std"));
    }
    let mut rows = Vec::new();
    for m in report.methods() {
        let mut row = vec![m.name().to_string()];
        for &k in &ks {
            let cell = report.cell(m, k).filter(|c| c.status == CellStatus::Ok);
            row.push(percent_cell(cell.and_then(|c| c.mean)));
            row.push(percent_cell(cell.and_then(|c| c.std)));
        }
        rows.push(row);
    }
    let csv = write_csv(&headers, &rows)?;

    let mut text = format!(
        "Accuracy on {} (trained on {}), {} trials\n",
        report.metadata.target_language,
        report.metadata.source_languages.join(", "),
        report.config.trials
    );
    let mut cols = vec!["Model".to_string()];
    cols.extend(ks.iter().map(|k| format!("{k}-shot")));
    let body: Vec<Vec<String>> = report
        .methods()
        .into_iter()
        .map(|m| {
            let mut r = vec![m.name().to_string()];
            for &k in &ks {
                r.push(match report.cell(m, k) {
                    Some(c) if c.status == CellStatus::Ok => {
                        format!("{} ± {:.2}", percent(c.mean.unwrap_or(f64::NAN)), 100.0 * c.std.unwrap_or(f64::NAN))
                    }
                    _ => MISSING.to_string(),
                });
            }
            r
        })
        .collect();
    text.push_str(&align(&cols, &body));
    Ok((text, csv))
}

/// One row per method, one column per target language, at shot count `k`.
pub fn emit_language_table(reports: &[ExperimentReport], k: usize) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Report("no reports given".into()));
    }
    let mut methods: Vec<Method> = reports.iter().flat_map(|r| r.methods()).collect();
    methods.sort();
    methods.dedup();
    let mut headers = vec!["model".to_string()];
    headers.extend(reports.iter().map(|r| r.metadata.target_language.clone()));
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|&m| {
            let mut row = vec![m.name().to_string()];
            row.extend(reports.iter().map(|r| percent_cell(r.mean(m, k))));
            row
        })
        .collect();
    let csv = write_csv(&headers, &rows)?;
    let text = format!("Accuracy in {k}-shot learning\n{}", align(&headers, &rows));
    Ok((text, csv))
}

fn write_csv(headers: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Report(e.to_string());
    w.write_record(headers).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

fn align(headers: &[String], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        rows.iter().map(|r| r[i].chars().count()).chain([headers[i].chars().count()]).max().unwrap_or(0)
    };
    let widths: Vec<usize> = (0..headers.len()).map(width).collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                let _ = write!(s, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(s, "  {}{c}", " ".repeat(pad));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(headers);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// A parsed tables CSV: header row and, per model, its numeric cells
/// (`None` for [`MISSING`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTable {
    pub headers: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub fn parse_tables_csv(text: &str) -> Result<ParsedTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::Report(e.to_string());
    let headers = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut it = rec.iter();
        let name = it.next().ok_or_else(|| Error::Report("empty CSV row".into()))?.to_string();
        let vals = it
            .map(|c| {
                if c == MISSING {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|e| Error::Report(format!("bad cell `{c}`: {e}")))
                }
            })
            .collect::<Result<_>>()?;
        rows.push((name, vals));
    }
    Ok(ParsedTable { headers, rows })
}

/// `iter,meta_loss,query_acc` lines.
pub fn trace_csv(points: &[TracePoint]) -> String {
    let mut s = String::from("iter,meta_loss,query_acc\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.iter, p.meta_loss, p.query_acc);
    }
    s
}

/// First iteration at which the trailing moving average (window `w`) of
/// `losses` is at or below `threshold`.
pub fn first_crossing(losses: &[f64], w: usize, threshold: f64) -> Option<usize> {
    smooth(losses, w).iter().position(|&v| v <= threshold)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
