//! Aggregation of finished run directories into result tables.
//!
//! A run directory is any directory holding both `final.csv` and
//! `metrics.csv`. Aggregates are computed from the per-run `final.csv` rows,
//! so they can be recomputed from those files alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;

/// One evaluated run as stored in its `final.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub teacher: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub auc: Option<f64>,
    pub agreement: f64,
    pub coverage: f64,
    pub queries: u64,
    pub partial: bool,
}

impl EvalReport {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "f1" => Some(self.f1),
            "auc" => self.auc,
            "agreement" => Some(self.agreement),
            "coverage" => Some(self.coverage),
            _ => None,
        }
    }
}

pub const REPORT_METRICS: [&str; 5] = ["accuracy", "f1", "auc", "agreement", "coverage"];

pub const TABLE_HEADER: &str = "dataset,method,teacher,metric,mean,std,runs";
pub const CURVE_HEADER: &str = "dataset,teacher,method,seed,step,coverage,agreement";
pub const CORRELATION_HEADER: &str = "dataset,teacher,method,seed,checkpoints,correlation";

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub dataset: String,
    pub method: String,
    pub teacher: String,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Run directories below `root` (including `root`), in sorted path order.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("final.csv").is_file() && dir.join("metrics.csv").is_file() {
            found.push(dir.clone());
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn read_final(path: &Path) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

/// Every per-run row below `root`.
pub fn collect_reports(root: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for dir in run_dirs(root)? {
        out.extend(read_final(&dir.join("final.csv"))?);
    }
    Ok(out)
}

/// Mean and population std per (dataset, method, teacher, metric), groups in
/// first-seen order. Undefined values are left out of both the statistics
/// and `runs`.
pub fn aggregate(reports: &[EvalReport]) -> Vec<TableRow> {
    let mut keys: Vec<(&str, &str, &str)> = Vec::new();
    for r in reports {
        let k = (r.dataset.as_str(), r.method.as_str(), r.teacher.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::new();
    for (d, m, t) in keys {
        let group: Vec<&EvalReport> = reports
            .iter()
            .filter(|r| r.dataset == d && r.method == m && r.teacher == t)
            .collect();
        for metric in REPORT_METRICS {
            let v: Vec<f64> = group.iter().filter_map(|r| r.metric(metric)).collect();
            let (mean, std) = metrics::mean_std(&v);
            rows.push(TableRow {
                dataset: d.into(),
                method: m.into(),
                teacher: t.into(),
                metric,
                mean,
                std,
                runs: v.len(),
            });
        }
    }
    rows
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        // shortest round-trip form
        format!("{v}")
    }
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dataset,
            r.method,
            r.teacher,
            r.metric,
            num(r.mean),
            num(r.std),
            r.runs
        ));
    }
    s
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    step: u64,
    coverage: f64,
    agreement: f64,
}

/// `(step, coverage, agreement)` per checkpoint of one run directory.
pub fn read_curve(dir: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let path = dir.join("metrics.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    rdr.deserialize::<MetricsRow>()
        .map(|r| r.map(|m| (m.step, m.coverage, m.agreement)).map_err(|e| csv_error(&path, e)))
        .collect()
}

fn run_identity(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("final.csv");
    read_final(&path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))
}

/// Coverage/agreement pairs of every run below `root`.
pub fn curve_csv(root: &Path) -> Result<String> {
    let mut s = format!("{CURVE_HEADER}\n");
    for dir in run_dirs(root)? {
        let id = run_identity(&dir)?;
        for (step, cov, agr) in read_curve(&dir)? {
            s.push_str(&format!(
                "{},{},{},{},{step},{},{}\n",
                id.dataset,
                id.teacher,
                id.method,
                id.seed,
                num(cov),
                num(agr)
            ));
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunCorrelation {
    pub dataset: String,
    pub teacher: String,
    pub method: String,
    pub seed: u64,
    pub checkpoints: usize,
    /// `None` when either series is constant or the run has too few
    /// checkpoints.
    pub correlation: Option<f64>,
}

/// Coverage/agreement correlation of the run in `dir`.
pub fn run_correlation(dir: &Path) -> Result<RunCorrelation> {
    let id = run_identity(dir)?;
    let curve = read_curve(dir)?;
    let cov: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let agr: Vec<f64> = curve.iter().map(|c| c.2).collect();
    Ok(RunCorrelation {
        dataset: id.dataset,
        teacher: id.teacher,
        method: id.method,
        seed: id.seed,
        checkpoints: curve.len(),
        correlation: match metrics::coverage_agreement_correlation(&cov, &agr) {
            Err(Error::UndefinedMetric(_)) => None,
            r => r?,
        },
    })
}

/// [`run_correlation`] of every run below `root`.
pub fn correlations(root: &Path) -> Result<Vec<RunCorrelation>> {
    run_dirs(root)?.iter().map(|d| run_correlation(d)).collect()
}

pub fn correlation_csv(rows: &[RunCorrelation]) -> String {
    let mut s = format!("{CORRELATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dataset,
            r.teacher,
            r.method,
            r.seed,
            r.checkpoints,
            r.correlation.map_or_else(|| "NA".into(), num)
        ));
    }
    s
}

/// Writes `table.csv`, `curves.csv` and `correlation.csv` into `out`.
/// Returns the aggregate rows.
pub fn write_report(root: &Path, out: &Path) -> Result<Vec<TableRow>> {
    let reports = collect_reports(root)?;
    if reports.is_empty() {
        return Err(Error::Data(format!("no run directories under {}", root.display())));
    }
    let rows = aggregate(&reports);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("table.csv", table_csv(&rows))?;
    write("curves.csv", curve_csv(root)?)?;
    write("correlation.csv", correlation_csv(&correlations(root)?))?;
    Ok(rows)
}
