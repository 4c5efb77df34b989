use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "name": "tiny",
    "kind": "trajectory",
    "dataset": {"type": "periodic", "signal": "sine", "n": 40, "m": 5},
    "model": {"type": "flow", "architecture": "coupling", "layers": 1, "hidden": [8]},
    "optimizer": {"epochs": 2}
}"#;

fn nflows(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nflows")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_versioned_outputs_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("run");
    let o = nflows(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "schema_version,epoch,train_loss,val_loss,epoch_seconds,wall_seconds,evaluations"
    );
    assert_eq!(csv.lines().count(), 4);
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["schema_version"], 1);
    let model = json(&out.join("model.json"));
    assert_eq!(model["schema_version"], 1);
    assert_eq!(model["config_hash"], metrics["config_hash"]);

    let model_path = out.join("model.json");
    let o = nflows(&["eval", "--model", model_path.to_str().unwrap(), "--split", "test"]);
    assert_eq!(o.status.code(), Some(0));
    let eval: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["value"], metrics["metrics"]["test"]);
}

#[test]
fn exit_codes_separate_bad_input_from_failed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let bad = write(dir.path(), "bad.json", &TINY.replace("\"optimizer\"", "\"optimiser\""));
    let o = nflows(&["train", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("optimiser"));

    let o = nflows(&["train", "--config", "/nonexistent/config.json", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let tpp = write(dir.path(), "tpp.json", TINY);
    let o = nflows(&["tpp", "--config", &tpp, "--out", out]);
    assert_eq!(o.status.code(), Some(2), "a trajectory config is not a tpp run");

    // A run that starts but cannot finish: point-process data has no
    // extrapolation split.
    let events = write(
        dir.path(),
        "events.json",
        r#"{"kind": "tpp", "dataset": {"type": "tpp", "process": "poisson", "n_seq": 10, "seq_len": 5},
            "model": {"type": "tpp", "encoder": {"kind": "gru_flow", "hidden_dim": 4, "hidden": [8]},
                      "decoder": {"type": "mixture", "components": 2}},
            "optimizer": {"epochs": 1}}"#,
    );
    let run = dir.path().join("events");
    let o = nflows(&["train", "--config", &events, "--out", run.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let model = run.join("model.json");
    let o = nflows(&["eval", "--model", model.to_str().unwrap(), "--split", "extrapolate_time"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_needs_two_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("b");
    let o = nflows(&["bench", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));

    let ode = TINY.replace(
        r#"{"type": "flow", "architecture": "coupling", "layers": 1, "hidden": [8]}"#,
        r#"{"type": "ode", "hidden": [8], "solver": {"method": "euler", "steps": 4}}"#,
    );
    let both = write(dir.path(), "both.json", &format!("[{TINY}, {ode}]"));
    let o = nflows(&["bench", "--config", &both, "--out", out.to_str().unwrap(), "--quiet", "--parallel", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("schema_version,name,model,status"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains(",ok,")));
    assert_eq!(json(&out.join("bench.json"))["schema_version"], 1);
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = nflows(&["gen", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let stdout = String::from_utf8(o.stdout).unwrap();
        let sum = stdout.lines().find_map(|l| l.strip_prefix("sha256 ")).unwrap().to_string();
        (sum, fs::read(out.join("dataset.bin")).unwrap())
    };
    let (a, bytes_a) = run("a", "7");
    let (b, bytes_b) = run("b", "7");
    let (c, _) = run("c", "8");
    assert_eq!(a, b);
    assert_eq!(bytes_a, bytes_b);
    assert_ne!(a, c);
    assert!(fs::read_to_string(dir.path().join("a/dataset.csv")).unwrap().lines().count() > 1);
}
