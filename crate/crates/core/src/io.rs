//! Files: instances (JSON), per-step traces (CSV) and run summaries (JSON).

use crate::model::{validate_instance, MarketInstance};
use crate::sim::{AggregateAccumulator, AggregateResult, RunResult, SolverSummary};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub const TRACE_HEADER: [&str; 6] = ["run_id", "t", "lender_id", "matched_borrower", "reward", "cumulative_regret"];

/// Renders `x` with 12 significant digits, `%g` style: positional notation
/// for decimal exponents in `[-4, 12)`, scientific otherwise, trailing zeros
/// dropped. Rust's float formatting is exact, so the text is the same on
/// every platform.
pub fn format_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..12).contains(&exp) {
        let decimals = (11 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Io { path: parent.to_path_buf(), source })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Instances are stored as JSON; reals use the shortest decimal that parses
/// back to the same bits, so reloading is exact.
pub fn write_instance(instance: &MarketInstance, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, instance).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_instance(path: &Path) -> Result<MarketInstance, IoError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(path))?;
    let instance: MarketInstance =
        serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    let report = validate_instance(&instance);
    if !report.is_valid() {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            message: format!(
                "invalid instance: {}",
                report.findings.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            ),
        });
    }
    Ok(instance)
}

/// Streams trace rows for any number of runs into one CSV file.
pub struct TraceWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
        inner
            .write_record(TRACE_HEADER)
            .map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
        Ok(Self { path: path.to_path_buf(), inner })
    }

    /// Rows ordered by `(t, lender_id)`.
    pub fn write_run(&mut self, run_id: usize, result: &RunResult) -> Result<(), IoError> {
        let csv_err = |source| IoError::Csv { path: self.path.clone(), source };
        for (record, cumulative) in result.records.iter().zip(&result.regret.cumulative) {
            for (l, matched) in record.lender_match.iter().enumerate() {
                self.inner
                    .write_record([
                        run_id.to_string(),
                        record.t.to_string(),
                        l.to_string(),
                        matched.map(|b| b.to_string()).unwrap_or_default(),
                        format_sig12(record.rewards[l]),
                        format_sig12(cumulative[l]),
                    ])
                    .map_err(csv_err)?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.inner.flush().map_err(io_err(&self.path))
    }
}

pub fn write_trace_csv(result: &RunResult, run_id: usize, path: &Path) -> Result<(), IoError> {
    let mut w = TraceWriter::create(path)?;
    w.write_run(run_id, result)?;
    w.finish()
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub run_id: usize,
    pub t: u64,
    pub lender_id: usize,
    pub matched_borrower: Option<usize>,
    pub reward: f64,
    pub cumulative_regret: f64,
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, IoError> {
    let format = |message: String| IoError::Format { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path).map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
    let header = reader
        .headers()
        .map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?
        .clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(format(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
        let line = i + 2;
        let field = |j: usize| record.get(j).unwrap_or_default();
        let bad = |name: &str| format(format!("line {line}: bad {name} `{}`", field(TRACE_HEADER.iter().position(|h| *h == name).unwrap_or(0))));
        rows.push(TraceRow {
            run_id: field(0).parse().map_err(|_| bad("run_id"))?,
            t: field(1).parse().map_err(|_| bad("t"))?,
            lender_id: field(2).parse().map_err(|_| bad("lender_id"))?,
            matched_borrower: match field(3) {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("matched_borrower"))?),
            },
            reward: field(4).parse().map_err(|_| bad("reward"))?,
            cumulative_regret: field(5).parse().map_err(|_| bad("cumulative_regret"))?,
        });
    }
    Ok(rows)
}

/// Rebuilds per-run cumulative traces `[run][t - 1][l]` from CSV rows,
/// keyed by run id. Every run must cover steps `1..=T` for lenders `0..N`
/// with the same `T` and `N`.
pub fn traces_from_rows(rows: &[TraceRow], path: &Path) -> Result<BTreeMap<usize, Vec<Vec<f64>>>, IoError> {
    let format = |message: String| IoError::Format { path: path.to_path_buf(), message };
    let mut runs: BTreeMap<usize, BTreeMap<(u64, usize), f64>> = BTreeMap::new();
    for r in rows {
        if r.t == 0 {
            return Err(format(format!("run {}: steps start at 1", r.run_id)));
        }
        if runs.entry(r.run_id).or_default().insert((r.t, r.lender_id), r.cumulative_regret).is_some() {
            return Err(format(format!("run {}: duplicate row for t={} lender {}", r.run_id, r.t, r.lender_id)));
        }
    }
    let mut shape = None;
    let mut out = BTreeMap::new();
    for (run, cells) in runs {
        let horizon = cells.keys().map(|(t, _)| *t).max().unwrap_or(0) as usize;
        let lenders = cells.keys().map(|(_, l)| *l).max().map_or(0, |l| l + 1);
        if *shape.get_or_insert((horizon, lenders)) != (horizon, lenders) || cells.len() != horizon * lenders {
            return Err(format(format!("run {run} does not cover the same steps and lenders as the others")));
        }
        let mut trace = vec![vec![0.0; lenders]; horizon];
        for ((t, l), v) in cells {
            trace[t as usize - 1][l] = v;
        }
        out.insert(run, trace);
    }
    Ok(out)
}

/// Aggregates CSV traces from one or more files. Run ids must be unique
/// across files.
pub fn aggregate_csv(paths: &[PathBuf]) -> Result<AggregateResult, IoError> {
    let mut all = BTreeMap::new();
    for path in paths {
        let rows = read_trace_csv(path)?;
        for (run, trace) in traces_from_rows(&rows, path)? {
            if all.insert(run, trace).is_some() {
                return Err(IoError::Format { path: path.clone(), message: format!("run id {run} appears in more than one file") });
            }
        }
    }
    let first = paths.first().cloned().unwrap_or_default();
    let (horizon, lenders) = match all.values().next() {
        Some(trace) => (trace.len(), trace.first().map_or(0, Vec::len)),
        None => return Err(IoError::Format { path: first, message: "no trace rows".into() }),
    };
    let mut acc = AggregateAccumulator::new(horizon, lenders);
    for trace in all.values() {
        acc.push_trace(trace, &SolverSummary::default())
            .map_err(|e| IoError::Format { path: first.clone(), message: e.to_string() })?;
    }
    acc.finish().map_err(|e| IoError::Format { path: first, message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LenderSummary {
    pub lender_id: usize,
    pub terminal_regret_mean: f64,
    pub terminal_regret_std: f64,
    pub terminal_slope: f64,
}

/// Document written next to the trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Experiment parameters; absent when summarizing bare CSV files.
    pub config: Option<Map<String, Value>>,
    /// Fingerprints of the instances used, in run order (one entry when the
    /// instance is shared).
    pub instances: Vec<String>,
    pub runs: usize,
    pub horizon: usize,
    pub num_lenders: usize,
    pub lenders: Vec<LenderSummary>,
    /// Absent when summarizing bare CSV files.
    pub solver: Option<SolverSummary>,
}

impl Summary {
    pub fn new(
        aggregate: &AggregateResult,
        config: Option<Map<String, Value>>,
        instances: Vec<String>,
        with_solver: bool,
    ) -> Self {
        let lenders = (0..aggregate.num_lenders)
            .map(|l| LenderSummary {
                lender_id: l,
                terminal_regret_mean: aggregate.terminal_mean[l],
                terminal_regret_std: aggregate.terminal_std[l],
                terminal_slope: aggregate.terminal_slope[l],
            })
            .collect();
        Self {
            config,
            instances,
            runs: aggregate.runs,
            horizon: aggregate.horizon,
            num_lenders: aggregate.num_lenders,
            lenders,
            solver: with_solver.then_some(aggregate.solver),
        }
    }
}

pub fn write_summary_json(summary: &Summary, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, summary).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_summary_json(path: &Path) -> Result<Summary, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(format_sig12(0.0), "0");
        assert_eq!(format_sig12(-0.0), "0");
        assert_eq!(format_sig12(1.0), "1");
        assert_eq!(format_sig12(-2.5), "-2.5");
        assert_eq!(format_sig12(0.1 + 0.2), "0.3");
        assert_eq!(format_sig12(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_sig12(2000.0 / 3.0), "666.666666667");
        assert_eq!(format_sig12(123456789012.4), "123456789012");
        assert_eq!(format_sig12(1234567890123.0), "1.23456789012e12");
        assert_eq!(format_sig12(0.0001), "0.0001");
        assert_eq!(format_sig12(0.00001234), "1.234e-5");
        assert_eq!(format_sig12(9.9999999999999), "10");
        assert_eq!(format_sig12(f64::NAN), "NaN");
    }

    #[test]
    fn sig12_parses_back_within_rounding() {
        let mut x = 1.0e-7_f64;
        while x < 1.0e14 {
            for v in [x, -x, x * 1.7364, x / 3.0] {
                let back: f64 = format_sig12(v).parse().unwrap();
                assert!((back - v).abs() <= 5e-12 * v.abs(), "{v} -> {back}");
            }
            x *= 3.3;
        }
    }
}
