//! Experiment output: long-format metric rows written to `metrics.csv` plus
//! a `summary.json` with the config echo and final-round values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measurement. `client_id` is `-1` for global (server-side) metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub client_id: i64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub wall_ms: u64,
}

/// Accumulated rows from a run plus per-round wall-clock times (kept out of
/// the rows so the CSV stays byte-identical across reruns).
#[derive(Debug, Clone, Default)]
pub struct MetricsTrace {
    pub rows: Vec<MetricRow>,
    pub round_wall_ms: Vec<u64>,
}

impl MetricsTrace {
    pub fn push(
        &mut self,
        round: usize,
        client_id: i64,
        split: &str,
        metric: &str,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            round,
            client_id,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            wall_ms: 0,
        });
    }

    /// Rows for the largest round present, keyed `split/metric` with the
    /// client id suffixed for per-client rows.
    pub fn final_metrics(&self) -> BTreeMap<String, f64> {
        let last = self.rows.iter().map(|r| r.round).max().unwrap_or(0);
        let mut map = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.round == last) {
            let key = if r.client_id < 0 {
                format!("{}/{}", r.split, r.metric)
            } else {
                format!("{}/{}/client_{}", r.split, r.metric, r.client_id)
            };
            map.insert(key, r.value);
        }
        map
    }

    /// Values of one metric across rounds for a given client (`-1` = global),
    /// ordered by round.
    pub fn series(&self, client_id: i64, split: &str, metric: &str) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.client_id == client_id && r.split == split && r.metric == metric)
            .map(|r| (r.round, r.value))
            .collect();
        out.sort_by_key(|&(round, _)| round);
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    version: String,
    config: serde_json::Value,
    rounds: usize,
    total_wall_ms: u64,
    final_metrics: BTreeMap<String, f64>,
}

/// Writes `metrics.csv` into `writer`. Split out from [`emit_metrics`] so
/// tests can compare bytes without touching the filesystem.
pub fn write_csv_to<W: std::io::Write>(rows: &[MetricRow], writer: W) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().from_writer(writer);
    csv.write_record(["round", "client_id", "split", "metric", "value", "wall_ms"])?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(Error::domain(format!(
                "non-finite value for metric {}/{} at round {}",
                r.split, r.metric, r.round
            )));
        }
        csv.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.split.clone(),
            r.metric.clone(),
            r.value.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("metrics stream", e))?;
    Ok(())
}

/// Writes `metrics.csv` and `summary.json` under `dir`, creating it if
/// needed. `config_echo` is stored verbatim in the summary.
pub fn emit_metrics(
    trace: &MetricsTrace,
    dir: &Path,
    config_echo: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let csv_path = dir.join("metrics.csv");
    let file = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    write_csv_to(&trace.rows, std::io::BufWriter::new(file))?;

    let rounds = trace
        .rows
        .iter()
        .map(|r| r.round + 1)
        .max()
        .unwrap_or(0)
        .max(trace.round_wall_ms.len());
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_echo,
        rounds,
        total_wall_ms: trace.round_wall_ms.iter().sum(),
        final_metrics: trace.final_metrics(),
    };
    let json_path = dir.join("summary.json");
    let file = std::fs::File::create(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(json_path.display().to_string(), e))
}

/// Reads back a `metrics.csv` produced by [`emit_metrics`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(file);
    let mut rows = Vec::new();
    for record in reader.deserialize::<MetricRow>() {
        rows.push(record?);
    }
    Ok(rows)
}
