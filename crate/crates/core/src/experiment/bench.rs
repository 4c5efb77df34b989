//! Side-by-side timing of several configurations.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::data::ExperimentData;
use super::train::{train, RunReport};

pub const BENCH_SCHEMA_VERSION: u32 = 1;

pub const BENCH_COLUMNS: [&str; 12] = [
    "schema_version",
    "name",
    "model",
    "status",
    "num_params",
    "epochs",
    "last_epoch_seconds",
    "mean_epoch_seconds",
    "evaluations_per_epoch",
    "test_metric",
    "speedup_vs_first",
    "message",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub model: String,
    /// `ok` or `failed`.
    pub status: String,
    pub num_params: usize,
    pub epochs: usize,
    pub last_epoch_seconds: f64,
    pub mean_epoch_seconds: f64,
    pub evaluations_per_epoch: f64,
    pub test_metric: f64,
    /// Last-epoch time of the first successful row divided by this row's.
    pub speedup_vs_first: f64,
    pub message: String,
    pub config_hash: String,
}

impl BenchRow {
    pub fn from_report(name: &str, r: &RunReport) -> Self {
        let trained: Vec<_> = r.rows.iter().filter(|row| row.epoch > 0).collect();
        let k = trained.len().max(1) as f64;
        Self {
            name: name.to_string(),
            model: r.model.clone(),
            status: "ok".into(),
            num_params: r.num_params,
            epochs: trained.len(),
            last_epoch_seconds: r.last_epoch_seconds().unwrap_or(f64::NAN),
            mean_epoch_seconds: trained.iter().map(|row| row.epoch_seconds).sum::<f64>() / k,
            evaluations_per_epoch: trained.iter().map(|row| row.evaluations as f64).sum::<f64>() / k,
            test_metric: r.metrics.get("test").copied().unwrap_or(f64::NAN),
            speedup_vs_first: f64::NAN,
            message: String::new(),
            config_hash: r.config_hash.clone(),
        }
    }

    pub fn failed(name: &str, model: &str, config_hash: String, err: &Error) -> Self {
        Self {
            name: name.to_string(),
            model: model.to_string(),
            status: "failed".into(),
            num_params: 0,
            epochs: 0,
            last_epoch_seconds: f64::NAN,
            mean_epoch_seconds: f64::NAN,
            evaluations_per_epoch: f64::NAN,
            test_metric: f64::NAN,
            speedup_vs_first: f64::NAN,
            message: err.to_string(),
            config_hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub rows: Vec<BenchRow>,
    pub wall_seconds: f64,
}

impl BenchReport {
    pub fn new(mut rows: Vec<BenchRow>, wall_seconds: f64) -> Self {
        let base = rows.iter().find(|r| r.status == "ok").map(|r| r.last_epoch_seconds);
        for r in &mut rows {
            if let (Some(b), "ok") = (base, r.status.as_str()) {
                r.speedup_vs_first = b / r.last_epoch_seconds;
            }
        }
        Self { schema_version: BENCH_SCHEMA_VERSION, rows, wall_seconds }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(BENCH_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                BENCH_SCHEMA_VERSION.to_string(),
                r.name.clone(),
                r.model.clone(),
                r.status.clone(),
                r.num_params.to_string(),
                r.epochs.to_string(),
                format!("{:.6}", r.last_epoch_seconds),
                format!("{:.6}", r.mean_epoch_seconds),
                format!("{:.1}", r.evaluations_per_epoch),
                format!("{:e}", r.test_metric),
                format!("{:.3}", r.speedup_vs_first),
                r.message.clone(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Checks that a bench has something to compare.
pub fn check_bench_size(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config("configs", format!("need ≥ 2 configs to compare, got {n}")));
    }
    Ok(())
}

/// Label for a config inside a bench: its name, or `config{i}`.
pub fn bench_label(cfg: &ExperimentConfig, i: usize) -> String {
    if cfg.name.is_empty() {
        format!("config{i}")
    } else {
        cfg.name.clone()
    }
}

/// Runs every config in turn. A failing run becomes a `failed` row; the rest
/// still run.
pub fn bench(configs: &[ExperimentConfig]) -> Result<BenchReport> {
    check_bench_size(configs.len())?;
    let clock = Instant::now();
    let mut rows = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let label = bench_label(cfg, i);
        let run = (|| {
            let t = Instant::now();
            let data = ExperimentData::generate(&cfg.dataset, cfg.seed)?;
            train(cfg, &data, t.elapsed().as_secs_f64())
        })();
        rows.push(match run {
            Ok(out) => BenchRow::from_report(&label, &out.report),
            Err(e) => BenchRow::failed(&label, cfg.model.type_name(), cfg.hash(), &e),
        });
    }
    Ok(BenchReport::new(rows, clock.elapsed().as_secs_f64()))
}
