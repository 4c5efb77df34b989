use nflows::data::io;
use nflows::data::Split;
use nflows::experiment::train::REPORT_COLUMNS;
use nflows::experiment::{train, ExperimentConfig, ExperimentData, ModelFile};
use nflows::Error;

fn tiny(model: &str, epochs: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "name": "tiny",
            "kind": "trajectory",
            "dataset": {{"type": "periodic", "signal": "sine", "n": 40, "m": 5}},
            "model": {model},
            "optimizer": {{"epochs": {epochs}, "batch_size": 10}}
        }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

const COUPLING: &str = r#"{"type": "flow", "architecture": "coupling", "layers": 1, "hidden": [8]}"#;

#[test]
fn training_is_deterministic() {
    let cfg = tiny(COUPLING, 3);
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed).unwrap();
    let a = train(&cfg, &data, 0.0).unwrap();
    let b = train(&cfg, &data, 0.0).unwrap();
    let losses = |r: &nflows::experiment::RunReport| r.rows.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&a.report), losses(&b.report));
    assert_eq!(a.report.metrics, b.report.metrics);
    assert_eq!(serde_json::to_string(&a.params).unwrap(), serde_json::to_string(&b.params).unwrap());
}

#[test]
fn zero_epochs_reports_the_initial_model() {
    let cfg = tiny(COUPLING, 0);
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed).unwrap();
    let out = train(&cfg, &data, 0.0).unwrap();
    assert_eq!(out.report.rows.len(), 1);
    assert_eq!(out.report.best_epoch, 0);
    assert_eq!(out.report.metrics["val"], out.report.rows[0].val_loss);
    assert!(out.report.extra.contains_key("semigroup_violation"));
}

#[test]
fn best_parameters_never_lose_to_the_start() {
    for model in [COUPLING, r#"{"type": "ode", "hidden": [8], "solver": {"method": "rk4", "steps": 4}}"#] {
        let cfg = tiny(model, 4);
        let data = ExperimentData::generate(&cfg.dataset, cfg.seed).unwrap();
        let out = train(&cfg, &data, 0.0).unwrap();
        let r = &out.report;
        assert!(r.metrics["val"] <= r.rows[0].val_loss + 1e-6);
        assert_eq!(r.metrics["val"], r.rows[r.best_epoch].val_loss);
        let again = out.model.evaluate(&out.params, &data, Split::Test, cfg.seed).unwrap();
        assert_eq!(again.loss, r.metrics["test"]);
    }
}

#[test]
fn report_csv_has_the_documented_columns() {
    let cfg = tiny(COUPLING, 2);
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed).unwrap();
    let out = train(&cfg, &data, 0.0).unwrap();
    let mut buf = Vec::new();
    out.report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(lines.count(), 3);
}

#[test]
fn saved_models_evaluate_identically() {
    let cfg = tiny(COUPLING, 2);
    let data = ExperimentData::generate(&cfg.dataset, cfg.seed).unwrap();
    let out = train(&cfg, &data, 0.0).unwrap();
    let file = ModelFile::new(&cfg, out.model, out.params);
    let back = ModelFile::from_json(&file.to_json()).unwrap();
    assert_eq!(back.config_hash, cfg.hash());
    // Evaluate on data that went through the binary file format.
    let reloaded = ExperimentData::from_dataset(io::decode(&io::encode(&data.to_dataset())).unwrap()).unwrap();
    for split in data.available_splits() {
        let a = file.model.evaluate(&file.params, &data, split, cfg.seed).unwrap();
        let b = back.model.evaluate(&back.params, &reloaded, split, cfg.seed).unwrap();
        assert_eq!(a.loss, b.loss, "{split:?}");
    }
}

#[test]
fn config_hash_ignores_the_name_only() {
    let a = tiny(COUPLING, 2);
    let mut b = a.clone();
    b.name = "renamed".into();
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn inconsistent_configs_are_rejected() {
    let text = r#"{
        "kind": "tpp",
        "dataset": {"type": "periodic", "signal": "sine"},
        "model": {"type": "flow", "architecture": "resnet"}
    }"#;
    assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config { .. })));
    let text = r#"{"kind": "trajectory", "dataset": {"type": "sink"}, "model": {"type": "ode"}, "epochs": 3}"#;
    let err = ExperimentConfig::from_json(text).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
