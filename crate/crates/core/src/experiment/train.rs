//! Training loop with early stopping, and the run report it produces.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{rng_for, Split};
use crate::density::{AdaptiveIntegral, Grid2, Refine};
use crate::error::{Error, Result};
use crate::ode::{SolverConfig, SolverStats};
use crate::optim::AdamState;
use crate::params::ParamSet;

use super::config::{ExperimentConfig, ExperimentKind};
use super::data::ExperimentData;
use super::model::{add_stats, Model};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Columns of `report.csv`, in order.
pub const REPORT_COLUMNS: [&str; 7] =
    ["schema_version", "epoch", "train_loss", "val_loss", "epoch_seconds", "wall_seconds", "evaluations"];

/// Times at which trained densities are checked for normalization.
pub const DENSITY_TIMES: [f64; 3] = [0.25, 0.5, 1.0];
/// Base grid of the normalization check, refined where the density is sharp.
pub const DENSITY_GRID: Grid2 = Grid2 { lo: -5.0, hi: 5.0, k: 100 };
pub const DENSITY_REFINE: Refine = Refine { tol: 1e-3, max_points: 150_000 };

/// One line of the training log. Epoch 0 holds the untrained losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches (including any penalty).
    pub train_loss: f64,
    pub val_loss: f64,
    /// Optimizer steps of this epoch only, without validation.
    pub epoch_seconds: f64,
    /// Cumulative wall clock since training started.
    pub wall_seconds: f64,
    /// Vector-field evaluations spent by the solver during the epoch's steps.
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub debug_build: bool,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            debug_build: cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub kind: ExperimentKind,
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    /// `mse` for trajectory runs, `nll` otherwise.
    pub metric: String,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Loss of the best parameters on every available split.
    pub metrics: BTreeMap<String, f64>,
    /// Task-specific numbers: ground-truth NLL, density integrals, semigroup violation.
    pub extra: BTreeMap<String, f64>,
    pub num_params: usize,
    pub data_seconds: f64,
    pub train_seconds: f64,
    pub environment: Environment,
}

impl RunReport {
    pub fn last_epoch_seconds(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.epoch > 0).map(|r| r.epoch_seconds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(REPORT_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                REPORT_SCHEMA_VERSION.to_string(),
                r.epoch.to_string(),
                format!("{:e}", r.train_loss),
                format!("{:e}", r.val_loss),
                format!("{:.6}", r.epoch_seconds),
                format!("{:.6}", r.wall_seconds),
                r.evaluations.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamSet,
    pub report: RunReport,
}

/// Trains `cfg` on `data`; `data_seconds` is only recorded in the report.
pub fn train(cfg: &ExperimentConfig, data: &ExperimentData, data_seconds: f64) -> Result<TrainOutcome> {
    train_with(cfg, data, data_seconds, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every logged row.
pub fn train_with(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    data_seconds: f64,
    on_epoch: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = rng_for(cfg.seed, 10);
    let mut ps = ParamSet::new();
    let model = Model::build(cfg, data, &mut ps, &mut init_rng)?;
    let mut batch_rng = rng_for(cfg.seed, 11);
    let mut loss_rng = rng_for(cfg.seed, 12);

    let n = data.train_len();
    if n == 0 {
        return Err(Error::config("dataset", "the training split is empty"));
    }
    let batch = cfg.optimizer.batch_size_for(cfg.kind).min(n);
    let opt = &cfg.optimizer;
    let mut adam = AdamState::new(opt.adam());

    let clock = Instant::now();
    let train0 = model.evaluate(&ps, data, Split::Train, cfg.seed)?;
    let val0 = model.evaluate(&ps, data, Split::Val, cfg.seed)?;
    let mut rows = vec![EpochRow {
        epoch: 0,
        train_loss: train0.loss,
        val_loss: val0.loss,
        epoch_seconds: 0.0,
        wall_seconds: clock.elapsed().as_secs_f64(),
        evaluations: 0,
    }];
    on_epoch(&rows[0]);

    let (mut best_val, mut best_epoch, mut best_ps) = (val0.loss, 0, ps.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=opt.epochs {
        let lr = opt.decay.map_or(opt.lr, |d| d.lr_at(opt.lr, epoch - 1));
        adam.set_lr(lr);
        order.shuffle(&mut batch_rng);
        let start = Instant::now();
        let mut stats = SolverStats::default();
        let mut total = 0.0;
        for (b, idx) in order.chunks(batch).enumerate() {
            let mut g = Tape::new(&ps);
            let out = model.batch_loss(&mut g, data, idx, cfg.autonomous_penalty, &mut loss_rng)?;
            let loss = g.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            let grads = g.backward(out.loss)?.into_param_grads();
            drop(g);
            adam.step_params(&mut ps, &grads)?;
            ps.power_iterate(1);
            add_stats(&mut stats, out.stats);
            total += loss * idx.len() as f64;
        }
        let epoch_seconds = start.elapsed().as_secs_f64();
        let val = model.evaluate(&ps, data, Split::Val, cfg.seed)?;
        let row = EpochRow {
            epoch,
            train_loss: total / n as f64,
            val_loss: val.loss,
            epoch_seconds,
            wall_seconds: clock.elapsed().as_secs_f64(),
            evaluations: stats.evaluations,
        };
        rows.push(row);
        on_epoch(&row);
        if val.loss < best_val || !best_val.is_finite() {
            best_val = val.loss;
            best_epoch = epoch;
            best_ps = ps.clone();
        } else if opt.patience.is_some_and(|p| epoch - best_epoch >= p) {
            stopped_early = true;
            break;
        }
    }
    let train_seconds = clock.elapsed().as_secs_f64();
    let ps = best_ps;

    let mut metrics = BTreeMap::new();
    for split in data.available_splits() {
        metrics.insert(split.as_str().to_string(), model.evaluate(&ps, data, split, cfg.seed)?.loss);
    }
    let extra = extra_metrics(cfg, &model, &ps, data)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: cfg.name.clone(),
        kind: cfg.kind,
        model: model.kind_name().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        metric: metric_name(cfg.kind).to_string(),
        rows,
        best_epoch,
        stopped_early,
        metrics,
        extra,
        num_params: ps.num_trainable(),
        data_seconds,
        train_seconds,
        environment: Environment::current(),
    };
    Ok(TrainOutcome { model, params: ps, report })
}

pub fn metric_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Trajectory | ExperimentKind::Stiff => "mse",
        ExperimentKind::Tpp | ExperimentKind::Density => "nll",
    }
}

fn extra_metrics(
    cfg: &ExperimentConfig,
    model: &Model,
    ps: &ParamSet,
    data: &ExperimentData,
) -> Result<BTreeMap<String, f64>> {
    let mut extra = BTreeMap::new();
    match (model, data) {
        (Model::Flow(_), ExperimentData::Trajectory(_)) => {
            extra.insert("semigroup_violation".into(), model.semigroup_violation(ps, data, cfg.seed)?);
        }
        (Model::Tpp { .. }, ExperimentData::Events { splits, .. }) => {
            if let Some(v) = splits[2].per_event_nll() {
                extra.insert("ground_truth_nll_test".into(), v);
            }
        }
        (Model::CouplingDensity(_), _) => {
            for t in DENSITY_TIMES {
                insert_integral(&mut extra, "integral", t, model.density_integral(ps, DENSITY_GRID, DENSITY_REFINE, t)?);
            }
        }
        (Model::Cnf(cnf), _) => {
            let mut euler = cnf.clone();
            euler.solver = SolverConfig::Euler { steps: 20 };
            let euler = Model::Cnf(euler);
            for t in DENSITY_TIMES {
                insert_integral(&mut extra, "integral", t, model.density_integral(ps, DENSITY_GRID, DENSITY_REFINE, t)?);
                insert_integral(&mut extra, "integral_euler20", t, euler.density_integral(ps, DENSITY_GRID, DENSITY_REFINE, t)?);
            }
        }
        _ => {}
    }
    Ok(extra)
}

fn insert_integral(extra: &mut BTreeMap<String, f64>, prefix: &str, t: f64, r: AdaptiveIntegral) {
    extra.insert(format!("{prefix}_t{t}"), r.value);
    extra.insert(format!("{prefix}_points_t{t}"), r.evaluations as f64);
    extra.insert(format!("{prefix}_error_t{t}"), r.error);
}
