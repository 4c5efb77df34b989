//! `nflows`: generate data, train and evaluate flows and ODE baselines, and
//! compare their cost.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 when the input is invalid.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nflows::data::io::{self, Dataset};
use nflows::data::Split;
use nflows::density::Grid2;
use nflows::experiment::bench::{bench_label, check_bench_size, BenchReport, BenchRow};
use nflows::experiment::{train_with, ExperimentConfig, ExperimentData, ExperimentKind, Model, ModelFile, RunReport};
use nflows::{Error, Result};

#[derive(Parser)]
#[command(name = "nflows", version, about = "Neural flows and neural-ODE baselines")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write dataset.bin and dataset.csv for a config's dataset.
    Gen(Common),
    /// Train a model; writes report.csv, metrics.json and model.json.
    Train(Common),
    /// Evaluate a saved model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// train, val, test, extrapolate_space or extrapolate_time.
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset file from `gen`; regenerated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate on this config's dataset instead of the model's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several configs and compare per-epoch cost.
    Bench {
        /// Config files; each holds one config or an array of configs.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run up to N configs at once in child processes. Timings are
        /// only comparable when N = 1.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Train a point-process model and compare with the ground-truth NLL.
    Tpp(Common),
    /// Train a density model and write a grid of densities for plotting.
    Density {
        #[command(flatten)]
        common: Common,
        /// Grid cells per axis of the density CSV.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Half-width of the square grid.
        #[arg(long, default_value_t = 2.0)]
        extent: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(c) => gen(&c),
        Cmd::Train(c) => train_cmd(&c, None).map(|_| ()),
        Cmd::Eval { model, split, data, config, seed, out } => {
            eval(&model, &split, data.as_deref(), config.as_deref(), seed, out.as_deref())
        }
        Cmd::Bench { config, seed, out, parallel, quiet } => bench_cmd(&config, seed, &out, parallel, quiet),
        Cmd::Tpp(c) => tpp_cmd(&c),
        Cmd::Density { common, grid, extent } => density_cmd(&common, grid, extent),
    }
}

fn read_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    let docs = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    docs.into_iter().map(|v| ExperimentConfig::from_json(&v.to_string())).collect()
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfgs = read_configs(path)?;
    if cfgs.len() != 1 {
        return Err(Error::config("--config", format!("expected one config, found {}", cfgs.len())));
    }
    let mut cfg = cfgs.remove(0);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen(c: &Common) -> Result<()> {
    let cfg = load_config(&c.config, c.seed)?;
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed)?;
    let ds = data.to_dataset();
    fs::create_dir_all(&c.out)?;
    let bin = c.out.join("dataset.bin");
    io::save(&ds, &bin)?;
    io::write_csv(&ds, fs::File::create(c.out.join("dataset.csv"))?)?;
    let checksum = io::sha256_hex(&io::encode(&ds));
    let units = match &ds {
        Dataset::Trajectories(parts) => format!("{} trajectories", parts.iter().map(|p| p.len()).sum::<usize>()),
        Dataset::Events(e) => format!("{} sequences", e.sequences.len()),
        Dataset::Density(d) => format!("{} samples", d.len()),
    };
    println!("wrote {} ({units}, {} rows)", bin.display(), ds.row_count());
    println!("sha256 {checksum}");
    Ok(())
}

fn train_cmd(c: &Common, expect: Option<ExperimentKind>) -> Result<(ExperimentConfig, Model, nflows::ParamSet, RunReport)> {
    let cfg = load_config(&c.config, c.seed)?;
    if let Some(k) = expect {
        if cfg.kind != k {
            return Err(Error::config("kind", format!("this command needs a `{}` config", k.name())));
        }
    }
    fs::create_dir_all(&c.out)?;
    let t = Instant::now();
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed)?;
    let data_seconds = t.elapsed().as_secs_f64();
    let quiet = c.quiet;
    let out = train_with(&cfg, &data, data_seconds, &mut |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {:.6e}  val {:.6e}  {:.3}s  nfe {}",
                r.epoch, r.train_loss, r.val_loss, r.epoch_seconds, r.evaluations
            );
        }
    })?;
    let report = out.report;
    report.write_csv(fs::File::create(c.out.join("report.csv"))?)?;
    fs::write(c.out.join("metrics.json"), report.to_json())?;
    ModelFile::new(&cfg, out.model.clone(), out.params.clone()).save(&c.out.join("model.json"))?;
    let mut line = format!("best epoch {}", report.best_epoch);
    for (k, v) in &report.metrics {
        line.push_str(&format!("  {k} {} {v:.6e}", report.metric));
    }
    println!("{line}");
    Ok((cfg, out.model, out.params, report))
}

fn eval(
    model: &Path,
    split: &str,
    data: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let split = Split::parse(split).ok_or_else(|| {
        Error::config("--split", format!("unknown split `{split}` (train, val, test, extrapolate_space, extrapolate_time)"))
    })?;
    let file = ModelFile::load(model)?;
    let mut cfg = match config {
        Some(p) => load_config(p, None)?,
        None => file.config.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = match data {
        Some(p) => ExperimentData::from_dataset(io::load(p)?)?,
        None => ExperimentData::generate(&cfg.dataset, cfg.seed)?,
    };
    if let (Some(a), Some(b)) = (file.model.state_dim(), data.dim()) {
        if a != b {
            return Err(Error::config("dataset", format!("model dimension {a} does not match data dimension {b}")));
        }
    }
    let t = Instant::now();
    let r = file.model.evaluate(&file.params, &data, split, cfg.seed)?;
    let metrics = json!({
        "schema_version": nflows::experiment::train::REPORT_SCHEMA_VERSION,
        "split": split.as_str(),
        "metric": nflows::experiment::train::metric_name(file.kind),
        "value": r.loss,
        "evaluations": r.evaluations,
        "seconds": t.elapsed().as_secs_f64(),
        "config_hash": file.config_hash,
    });
    let text = serde_json::to_string_pretty(&metrics)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("eval_{}.json", split.as_str())), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn bench_cmd(paths: &[PathBuf], seed: Option<u64>, out: &Path, parallel: usize, quiet: bool) -> Result<()> {
    let mut configs = Vec::new();
    for p in paths {
        configs.extend(read_configs(p)?);
    }
    if let Some(s) = seed {
        configs.iter_mut().for_each(|c| c.seed = s);
    }
    check_bench_size(configs.len())?;
    if parallel == 0 {
        return Err(Error::config("--parallel", "must be at least 1"));
    }
    fs::create_dir_all(out)?;
    let clock = Instant::now();
    let exe = std::env::current_exe()?;
    let mut rows: Vec<Option<BenchRow>> = vec![None; configs.len()];
    let mut pending: Vec<usize> = (0..configs.len()).rev().collect();
    let mut running: Vec<(usize, std::process::Child)> = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < parallel {
            let Some(i) = pending.pop() else { break };
            let dir = out.join(format!("run{i}"));
            fs::create_dir_all(&dir)?;
            let cfg_path = dir.join("config.json");
            fs::write(&cfg_path, configs[i].to_json())?;
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--config").arg(&cfg_path).arg("--out").arg(&dir);
            if quiet {
                cmd.arg("--quiet");
            }
            if !quiet {
                eprintln!("[bench] start {} ({})", bench_label(&configs[i], i), configs[i].model.type_name());
            }
            running.push((i, cmd.spawn()?));
        }
        // Wait on the oldest child; with parallel = 1 this is strictly sequential.
        let (i, mut child) = running.remove(0);
        let status = child.wait()?;
        let label = bench_label(&configs[i], i);
        let dir = out.join(format!("run{i}"));
        let row = if status.success() {
            let text = fs::read_to_string(dir.join("metrics.json"))?;
            let report: RunReport = serde_json::from_str(&text)?;
            BenchRow::from_report(&label, &report)
        } else {
            let err = Error::Invalid(format!("run exited with {status}; see {}", dir.display()));
            BenchRow::failed(&label, configs[i].model.type_name(), configs[i].hash(), &err)
        };
        rows[i] = Some(row);
    }
    let report = BenchReport::new(rows.into_iter().map(|r| r.expect("every run finished")).collect(), clock.elapsed().as_secs_f64());
    report.write_csv(fs::File::create(out.join("bench.csv"))?)?;
    fs::write(out.join("bench.json"), report.to_json())?;
    println!("{:<16} {:<18} {:>8} {:>10} {:>12} {:>12} {:>9}", "name", "model", "status", "params", "epoch_s", "test", "speedup");
    for r in &report.rows {
        println!(
            "{:<16} {:<18} {:>8} {:>10} {:>12.4} {:>12.4e} {:>9.2}",
            r.name, r.model, r.status, r.num_params, r.last_epoch_seconds, r.test_metric, r.speedup_vs_first
        );
    }
    Ok(())
}

fn tpp_cmd(c: &Common) -> Result<()> {
    let (_, _, _, report) = train_cmd(c, Some(ExperimentKind::Tpp))?;
    let model = report.metrics.get("test").copied().unwrap_or(f64::NAN);
    if let Some(truth) = report.extra.get("ground_truth_nll_test") {
        println!("test NLL per event {model:.4}  ground truth {truth:.4}  gap {:+.4}", model - truth);
    }
    Ok(())
}

fn density_cmd(c: &Common, grid: usize, extent: f64) -> Result<()> {
    if grid == 0 || !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::config("--grid/--extent", "need a positive grid size and extent"));
    }
    let (_, model, ps, report) = train_cmd(c, Some(ExperimentKind::Density))?;
    let g = Grid2 { lo: -extent, hi: extent, k: grid };
    let pts = g.points();
    let mut w = csv::Writer::from_path(c.out.join("density_grid.csv")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["x", "y", "t", "density"]).map_err(csv_err)?;
    for t in nflows::experiment::train::DENSITY_TIMES {
        let lp = model.density_values(&ps, &pts, &vec![t; pts.rows()])?;
        for (i, l) in lp.iter().enumerate() {
            let (x, y) = (pts.get(i, 0), pts.get(i, 1));
            w.write_record([x.to_string(), y.to_string(), t.to_string(), l.exp().to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    for (k, v) in &report.extra {
        println!("{k} {v:.5}");
    }
    Ok(())
}
