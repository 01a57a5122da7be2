//! Metrics export: `metrics.csv`, `metrics.json`, `heatmap.csv`, and
//! cross-seed summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::experiment::MetricsLog;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "task_id,acc_after_final,running_avg_acc,routed_to,params_trainable,seed";

/// One row per task. Contains nothing timing-dependent, so fixed-seed runs
/// produce identical files.
pub fn metrics_csv(log: &MetricsLog) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for t in 0..log.final_acc.len() {
        let _ = writeln!(
            s,
            "{t},{:.6},{:.6},{},{},{}",
            log.final_acc[t], log.running_avg[t], log.routed_to[t], log.footprint[t].total, log.seed
        );
    }
    s
}

pub fn heatmap_csv(rows: &[Vec<f32>]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let mut s = String::from("task");
    for e in 0..cols {
        let _ = write!(s, ",ae{e}");
    }
    s.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics(dir: &Path, log: &MetricsLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(log))?;
    fs::write(dir.join("heatmap.csv"), heatmap_csv(&log.heatmap))?;
    let json = serde_json::to_string_pretty(log).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("metrics.json"), json)?;
    Ok(())
}

/// Final average accuracy and seed read back from a `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub tasks: usize,
    pub avg_acc: f64,
    pub params_trainable: usize,
}

pub fn read_metrics_csv(text: &str) -> Result<RunSummary> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics.csv header not recognized".into()));
    }
    let mut accs = Vec::new();
    let mut seed = 0;
    let mut params = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Config(format!("malformed metrics row {line:?}")));
        }
        let bad = |_| Error::Config(format!("malformed metrics row {line:?}"));
        accs.push(f[1].parse::<f64>().map_err(bad)?);
        params = f[4]
            .parse()
            .map_err(|_| Error::Config(format!("malformed metrics row {line:?}")))?;
        seed = f[5]
            .parse()
            .map_err(|_| Error::Config(format!("malformed metrics row {line:?}")))?;
    }
    if accs.is_empty() {
        return Err(Error::Config("metrics.csv has no rows".into()));
    }
    Ok(RunSummary {
        seed,
        tasks: accs.len(),
        avg_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        params_trainable: params,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
