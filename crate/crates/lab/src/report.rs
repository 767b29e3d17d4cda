//! Run directories: JSON records plus CSV tables with fixed column names.
//!
//! Layout of `<out>/<config>/<mode>/`:
//!
//! - `records/trial_NNNNN.json`: one [`TrialRecord`] per completed trial
//! - `aggregate.json`: the [`AggregateReport`]
//! - `run.json`: timing and failure summary
//! - `paths.csv`, `posterior_summary.csv`, `metrics.csv`, `step_stats.csv`,
//!   `eig_trace.csv`, `trials.csv`

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use icc_core::icc::{AggregateReport, FinalMetrics, StressBands, TrialRecord};
use icc_core::stats::BoxStats;
use serde::{Deserialize, Serialize};

use crate::runner::TrialBatch;

pub const PATHS_CSV: &str = "paths.csv";
pub const POSTERIOR_CSV: &str = "posterior_summary.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STEP_STATS_CSV: &str = "step_stats.csv";
pub const EIG_TRACE_CSV: &str = "eig_trace.csv";
pub const TRIALS_CSV: &str = "trials.csv";
pub const RECORDS_DIR: &str = "records";

pub const BAND_COLUMNS: [&str; 7] = ["pseudotime", "s11_lo", "s11_hi", "s22_lo", "s22_hi", "s11_true", "s22_true"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: String,
    pub mode: String,
    pub master_seed: u64,
    pub jobs: usize,
    pub completed: usize,
    pub failed: usize,
    pub flagged: usize,
    pub wall_seconds: f64,
    pub mean_trial_seconds: f64,
    pub mean_step_seconds: f64,
}

pub fn run_dir(out: &Path, config: &str, mode: &str) -> PathBuf {
    out.join(config).join(mode)
}

pub fn record_file(dir: &Path, trial_index: u64) -> PathBuf {
    dir.join(RECORDS_DIR).join(format!("trial_{trial_index:05}.json"))
}

fn num(v: f64) -> String {
    // `Display` for f64 is locale independent and round-trips.
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_record(path: &Path) -> Result<TrialRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Every record in a run directory (or its `records/` subdirectory), in
/// trial order.
pub fn read_records(dir: &Path) -> Result<Vec<TrialRecord>> {
    let dir = if dir.join(RECORDS_DIR).is_dir() { dir.join(RECORDS_DIR) } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| read_record(p)).collect()
}

/// Writes records, aggregate and tables for one batch.
pub fn write_run(dir: &Path, batch: &TrialBatch, report: Option<&AggregateReport>, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir.join(RECORDS_DIR))?;
    for r in &batch.records {
        write_json(&record_file(dir, r.trial_index), r)?;
    }
    write_json(&dir.join("run.json"), summary)?;
    write_trials(&dir.join(TRIALS_CSV), batch)?;
    write_eig_trace(&dir.join(EIG_TRACE_CSV), &batch.records)?;
    if let Some(report) = report {
        write_json(&dir.join("aggregate.json"), report)?;
        let theta_true = &batch.records[0].theta_true;
        write_paths(&dir.join(PATHS_CSV), report)?;
        write_posterior(&dir.join(POSTERIOR_CSV), report, theta_true)?;
        write_metrics(&dir.join(METRICS_CSV), report)?;
        write_step_stats(&dir.join(STEP_STATS_CSV), report)?;
    }
    Ok(())
}

fn write_trials(path: &Path, batch: &TrialBatch) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "trial_index",
        "status",
        "path",
        "flagged",
        "seconds",
        "total_variance",
        "generalized_variance",
        "mahalanobis",
        "message",
    ])?;
    for (r, secs) in batch.records.iter().zip(&batch.seconds) {
        let s = r.final_step().map(|s| &s.summary);
        w.write_record([
            r.trial_index.to_string(),
            "ok".into(),
            r.path_label(),
            r.flagged.to_string(),
            num(*secs),
            s.map_or(String::new(), |s| num(s.total_variance)),
            s.map_or(String::new(), |s| num(s.generalized_variance)),
            s.and_then(|s| s.mahalanobis).map_or(String::new(), num),
            String::new(),
        ])?;
    }
    for f in &batch.failures {
        w.write_record([
            f.trial_index.to_string(),
            "failed".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            f.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_eig_trace(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["trial_index", "step", "candidate", "eig", "n_outer", "n_inner", "underflow_count", "chosen"])?;
    for r in records {
        for s in &r.steps {
            for e in &s.eig {
                w.write_record([
                    r.trial_index.to_string(),
                    s.step.to_string(),
                    e.candidate.axis.as_str().to_string(),
                    num(e.value),
                    e.n_outer.to_string(),
                    e.n_inner.to_string(),
                    e.underflow_count.to_string(),
                    (e.candidate.axis == s.axis).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_paths(path: &Path, report: &AggregateReport) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["config".to_string(), "design".into(), "path".into(), "count".into(), "percent".into()];
    header.extend(report.parameters.iter().map(|p| format!("mean_{}", p.key())));
    header.push("generalized_variance".into());
    w.write_record(&header)?;
    for c in &report.paths {
        let mut row = vec![
            report.config.clone(),
            report.mode.to_string(),
            c.path.clone(),
            c.count.to_string(),
            num(c.percent),
        ];
        row.extend(c.expected_value.iter().map(|v| num(*v)));
        row.push(num(c.generalized_variance));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn subsets(report: &AggregateReport) -> Vec<(&'static str, &FinalMetrics)> {
    let mut out = vec![("all", &report.final_all)];
    if let Some(u) = &report.final_unflagged {
        out.push(("unflagged", u));
    }
    out
}

fn write_posterior(path: &Path, report: &AggregateReport, theta_true: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "config",
        "design",
        "subset",
        "n_trials",
        "parameter",
        "theta_true",
        "expected_value",
        "variance",
        "ci_lower",
        "ci_upper",
        "map_ape_percent",
        "mean_map_ape_percent",
        "cv",
    ])?;
    for (subset, m) in subsets(report) {
        for (k, p) in report.parameters.iter().enumerate() {
            w.write_record([
                report.config.clone(),
                report.mode.to_string(),
                subset.into(),
                m.n_trials.to_string(),
                p.key().into(),
                num(theta_true[k]),
                num(m.expected_value[k]),
                num(m.variance[k]),
                num(m.ci_lower[k]),
                num(m.ci_upper[k]),
                num(m.map_ape_percent[k]),
                num(m.mean_map_ape_percent[k]),
                num(m.cv[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, report: &AggregateReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "config",
        "design",
        "subset",
        "n_trials",
        "n_failed",
        "n_flagged",
        "total_variance",
        "generalized_variance",
        "mahalanobis",
    ])?;
    for (subset, m) in subsets(report) {
        w.write_record([
            report.config.clone(),
            report.mode.to_string(),
            subset.into(),
            m.n_trials.to_string(),
            report.failures.len().to_string(),
            report.n_flagged.to_string(),
            num(m.total_variance),
            num(m.generalized_variance),
            num(m.mahalanobis),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn box_row(prefix: [String; 5], b: &BoxStats) -> Vec<String> {
    let mut row = prefix.to_vec();
    row.extend([b.min, b.q1, b.median, b.q3, b.max, b.mean].map(num));
    row
}

fn write_step_stats(path: &Path, report: &AggregateReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "config", "design", "step", "quantity", "target", "min", "q1", "median", "q3", "max", "mean",
    ])?;
    let design = report.mode.to_string();
    for s in &report.steps {
        let prefix = |q: &str, t: &str| [report.config.clone(), design.clone(), s.step.to_string(), q.into(), t.into()];
        for (k, p) in report.parameters.iter().enumerate() {
            w.write_record(box_row(prefix("expected_value", p.key()), &s.expected_value[k]))?;
            w.write_record(box_row(prefix("variance", p.key()), &s.variance[k]))?;
        }
        w.write_record(box_row(prefix("generalized_variance", ""), &s.generalized_variance))?;
        w.write_record(box_row(prefix("total_variance", ""), &s.total_variance))?;
        for (axis, b) in icc_core::loadpath::Axis::BOTH.iter().zip(&s.eig) {
            if let Some(b) = b {
                w.write_record(box_row(prefix("eig", axis.as_str()), b))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_bands(path: &Path, bands: &StressBands) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = writer(path)?;
    w.write_record(BAND_COLUMNS)?;
    for k in 0..bands.pseudotime.len() {
        w.write_record(
            [
                bands.pseudotime[k],
                bands.s11_lo[k],
                bands.s11_hi[k],
                bands.s22_lo[k],
                bands.s22_hi[k],
                bands.s11_true[k],
                bands.s22_true[k],
            ]
            .map(num),
        )?;
    }
    w.flush()?;
    Ok(())
}
