//! Experiment configuration: one flat JSON document, validated strictly.

use serde::{Deserialize, Serialize};

use crate::data::{PeriodicKind, TppKind};
use crate::error::{Error, Result};
use crate::flows::{Architecture, EmbeddingKind, FlowSpec};
use crate::nn::Activation;
use crate::ode::SolverConfig;
use crate::optim::{AdamConfig, StepDecay};
use crate::tpp::{EncoderSpec, McConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Trajectory,
    Stiff,
    Tpp,
    Density,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Trajectory => "trajectory",
            ExperimentKind::Stiff => "stiff",
            ExperimentKind::Tpp => "tpp",
            ExperimentKind::Density => "density",
        }
    }
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    /// Free-form label; not part of the config hash.
    #[serde(default)]
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Weight γ of the semigroup penalty; flow models only.
    #[serde(default)]
    pub autonomous_penalty: f64,
}

fn n1000() -> usize {
    1000
}
fn m50() -> usize {
    50
}
fn x_range() -> (f64, f64) {
    (-2.0, 2.0)
}
fn t_range() -> (f64, f64) {
    (0.0, 10.0)
}
fn interval() -> f64 {
    0.125
}
fn t_max() -> f64 {
    15.0
}
fn seq_len() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Periodic {
        signal: PeriodicKind,
        #[serde(default = "n1000")]
        n: usize,
        #[serde(default = "m50")]
        m: usize,
        #[serde(default = "x_range")]
        x_range: (f64, f64),
        #[serde(default = "t_range")]
        t_range: (f64, f64),
    },
    Sink {
        #[serde(default = "n1000")]
        n: usize,
        #[serde(default = "m50")]
        m: usize,
    },
    Ellipse {
        #[serde(default = "n1000")]
        n: usize,
        #[serde(default = "m50")]
        m: usize,
    },
    Stiff {
        #[serde(default = "n1000")]
        n: usize,
        #[serde(default = "interval")]
        interval_len: f64,
        #[serde(default = "t_max")]
        t_max: f64,
    },
    Tpp {
        /// poisson, renewal, hawkes1 or hawkes2.
        process: String,
        #[serde(default = "n1000")]
        n_seq: usize,
        #[serde(default = "seq_len")]
        seq_len: usize,
    },
    Density2d {
        #[serde(default = "n1000")]
        n: usize,
    },
}

impl DatasetSpec {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            DatasetSpec::Periodic { .. } | DatasetSpec::Sink { .. } | DatasetSpec::Ellipse { .. } => {
                ExperimentKind::Trajectory
            }
            DatasetSpec::Stiff { .. } => ExperimentKind::Stiff,
            DatasetSpec::Tpp { .. } => ExperimentKind::Tpp,
            DatasetSpec::Density2d { .. } => ExperimentKind::Density,
        }
    }

    /// State dimension of trajectory data.
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Sink { .. } | DatasetSpec::Ellipse { .. } | DatasetSpec::Density2d { .. } => 2,
            _ => 1,
        }
    }

    pub fn tpp_kind(&self) -> Option<TppKind> {
        match self {
            DatasetSpec::Tpp { process, .. } => TppKind::by_name(process),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("dataset.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        match self {
            DatasetSpec::Periodic { n, m, x_range, t_range, .. } => {
                positive("n", *n)?;
                positive("m", *m)?;
                if !(x_range.0 < x_range.1) || !x_range.0.is_finite() || !x_range.1.is_finite() {
                    return Err(Error::config("dataset.x_range", "need lo < hi"));
                }
                if !(0.0 <= t_range.0 && t_range.0 < t_range.1 && t_range.1 < 30.0) {
                    return Err(Error::config("dataset.t_range", "need 0 ≤ lo < hi < 30"));
                }
            }
            DatasetSpec::Sink { n, m } | DatasetSpec::Ellipse { n, m } => {
                positive("n", *n)?;
                positive("m", *m)?;
            }
            DatasetSpec::Stiff { n, interval_len, t_max } => {
                if *n < 2 {
                    return Err(Error::config("dataset.n", "need at least two pairs"));
                }
                if !(*interval_len > 0.0 && t_max > interval_len && t_max.is_finite()) {
                    return Err(Error::config("dataset.interval_len", "need 0 < interval_len < t_max"));
                }
            }
            DatasetSpec::Tpp { process, n_seq, seq_len } => {
                if TppKind::by_name(process).is_none() {
                    return Err(Error::config(
                        "dataset.process",
                        format!("unknown process `{process}` (expected poisson, renewal, hawkes1 or hawkes2)"),
                    ));
                }
                positive("n_seq", *n_seq)?;
                positive("seq_len", *seq_len)?;
            }
            DatasetSpec::Density2d { n } => positive("n", *n)?,
        }
        Ok(())
    }
}

fn layers1() -> usize {
    1
}
fn hidden64() -> Vec<usize> {
    vec![64, 64]
}
fn coeff() -> f64 {
    0.9
}
fn tanh() -> Activation {
    Activation::Tanh
}
fn dopri() -> SolverConfig {
    SolverConfig::dopri5(1e-3, 1e-4)
}
fn yes() -> bool {
    true
}
fn layers4() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Flow {
        architecture: Architecture,
        #[serde(default = "layers1")]
        layers: usize,
        #[serde(default = "hidden64")]
        hidden: Vec<usize>,
        #[serde(default)]
        embedding: Option<EmbeddingKind>,
        #[serde(default = "coeff")]
        spectral_coeff: f64,
        #[serde(default = "tanh")]
        activation: Activation,
        #[serde(default)]
        zero_init: bool,
    },
    Ode {
        #[serde(default = "hidden64")]
        hidden: Vec<usize>,
        #[serde(default = "tanh")]
        activation: Activation,
        #[serde(default = "dopri")]
        solver: SolverConfig,
    },
    Tpp {
        encoder: EncoderSpec,
        decoder: DecoderSpec,
        #[serde(default = "yes")]
        normalize: bool,
        #[serde(default = "yes")]
        log1p: bool,
    },
    CouplingDensity {
        #[serde(default = "layers4")]
        layers: usize,
        #[serde(default = "hidden64")]
        hidden: Vec<usize>,
    },
    Cnf {
        #[serde(default = "hidden64")]
        hidden: Vec<usize>,
        #[serde(default = "dopri")]
        solver: SolverConfig,
    },
}

fn k8() -> usize {
    8
}
fn hidden_head() -> Vec<usize> {
    vec![64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    Mixture {
        #[serde(default = "k8")]
        components: usize,
    },
    Intensity {
        #[serde(default = "hidden_head")]
        hidden: Vec<usize>,
        #[serde(default)]
        mc: McConfig,
    },
}

impl ModelSpec {
    pub fn type_name(&self) -> &'static str {
        match self {
            ModelSpec::Flow { .. } => "flow",
            ModelSpec::Ode { .. } => "ode",
            ModelSpec::Tpp { .. } => "tpp",
            ModelSpec::CouplingDensity { .. } => "coupling_density",
            ModelSpec::Cnf { .. } => "cnf",
        }
    }

    pub fn flow_spec(&self, dim: usize) -> Option<FlowSpec> {
        match self {
            ModelSpec::Flow { architecture, layers, hidden, embedding, spectral_coeff, activation, zero_init } => {
                Some(FlowSpec {
                    architecture: *architecture,
                    dim,
                    layers: *layers,
                    hidden: hidden.clone(),
                    embedding: *embedding,
                    spectral_coeff: *spectral_coeff,
                    activation: *activation,
                    zero_init: *zero_init,
                })
            }
            _ => None,
        }
    }
}

fn lr() -> f64 {
    1e-3
}
fn wd() -> f64 {
    1e-4
}
fn epochs() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub decay: Option<StepDecay>,
    /// Trajectories, sequences or samples per batch; 100 for trajectory
    /// data and 50 otherwise when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "epochs")]
    pub epochs: usize,
    /// Stop after this many epochs without a better validation loss.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { lr: lr(), weight_decay: wd(), decay: None, batch_size: None, epochs: epochs(), patience: None }
    }
}

impl OptimizerSpec {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn batch_size_for(&self, kind: ExperimentKind) -> usize {
        self.batch_size.unwrap_or(match kind {
            ExperimentKind::Trajectory | ExperimentKind::Stiff => 100,
            ExperimentKind::Tpp | ExperimentKind::Density => 50,
        })
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            Error::config(field, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.dataset.validate()?;
        if self.dataset.kind() != self.kind {
            return Err(Error::config(
                "dataset.type",
                format!("this dataset belongs to a `{}` experiment, not `{}`", self.dataset.kind().name(), self.kind.name()),
            ));
        }
        let model_ok = matches!(
            (self.kind, &self.model),
            (ExperimentKind::Trajectory | ExperimentKind::Stiff, ModelSpec::Flow { .. } | ModelSpec::Ode { .. })
                | (ExperimentKind::Tpp, ModelSpec::Tpp { .. })
                | (ExperimentKind::Density, ModelSpec::CouplingDensity { .. } | ModelSpec::Cnf { .. })
        );
        if !model_ok {
            return Err(Error::config(
                "model.type",
                format!("`{}` models cannot run a `{}` experiment", self.model.type_name(), self.kind.name()),
            ));
        }
        match &self.model {
            ModelSpec::Flow { .. } => {
                let spec = self.model.flow_spec(self.dataset.dim()).expect("flow model");
                spec.validate().map_err(|e| prefix("model", e))?;
            }
            ModelSpec::Ode { hidden, solver, .. } | ModelSpec::Cnf { hidden, solver } => {
                if hidden.contains(&0) {
                    return Err(Error::config("model.hidden", "widths must be positive"));
                }
                solver.validate().map_err(|e| prefix("model.solver", e))?;
            }
            ModelSpec::Tpp { encoder, decoder, .. } => {
                encoder.validate().map_err(|e| prefix("model", e))?;
                match decoder {
                    DecoderSpec::Mixture { components } if *components == 0 => {
                        return Err(Error::config("model.decoder.components", "must be positive"));
                    }
                    DecoderSpec::Intensity { hidden, mc } => {
                        if hidden.contains(&0) {
                            return Err(Error::config("model.decoder.hidden", "widths must be positive"));
                        }
                        if mc.n_mc == 0 {
                            return Err(Error::config("model.decoder.mc.n_mc", "must be positive"));
                        }
                    }
                    _ => {}
                }
            }
            ModelSpec::CouplingDensity { layers, hidden } => {
                if *layers == 0 {
                    return Err(Error::config("model.layers", "must be positive"));
                }
                if hidden.contains(&0) {
                    return Err(Error::config("model.hidden", "widths must be positive"));
                }
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if o.batch_size == Some(0) {
            return Err(Error::config("optimizer.batch_size", "must be positive"));
        }
        if o.patience == Some(0) {
            return Err(Error::config("optimizer.patience", "must be positive when set"));
        }
        if let Some(d) = o.decay {
            if d.every == 0 || !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::config("optimizer.decay", "need every ≥ 1 and factor in (0, 1]"));
            }
        }
        if !(self.autonomous_penalty >= 0.0 && self.autonomous_penalty.is_finite()) {
            return Err(Error::config("autonomous_penalty", "must be non-negative"));
        }
        if self.autonomous_penalty > 0.0 && !matches!(self.model, ModelSpec::Flow { .. }) {
            return Err(Error::config("autonomous_penalty", "only flow models take the semigroup penalty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `name`. Defaults are
    /// filled in before hashing, so spelling a default out does not change
    /// the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.name.clear();
        // serde_json maps are sorted, which makes this canonical.
        let value = serde_json::to_value(&c).expect("config serializes");
        crate::data::io::sha256_hex(value.to_string().as_bytes())
    }
}

fn prefix(scope: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{scope}.{field}"), reason),
        other => Error::config(scope, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINE: &str = r#"{
        "kind": "trajectory",
        "dataset": {"type": "periodic", "signal": "sine", "n": 20, "m": 5},
        "model": {"type": "flow", "architecture": "coupling", "layers": 2, "hidden": [16]},
        "optimizer": {"epochs": 2}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(SINE).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.optimizer.batch_size_for(c.kind), 100);
        assert_eq!(c.dataset.dim(), 1);
        let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_and_kinds_are_rejected() {
        let extra = SINE.replace("\"seed_\": 1,", "").replacen('{', "{\"sed\": 3,", 1);
        let err = ExperimentConfig::from_json(&extra).unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("sed"), "{err}");
        let bad_kind = SINE.replace("\"sine\"", "\"cosine\"");
        let err = ExperimentConfig::from_json(&bad_kind).unwrap_err().to_string();
        assert!(err.contains("cosine") && err.contains("`dataset`"), "{err}");
        let tpp = r#"{"kind": "tpp", "dataset": {"type": "tpp", "process": "selfcorrecting"},
            "model": {"type": "tpp", "encoder": {"kind": "gru_flow", "hidden_dim": 8}, "decoder": {"type": "mixture"}}}"#;
        let err = ExperimentConfig::from_json(tpp).unwrap_err();
        assert!(err.to_string().contains("dataset.process"), "{err}");
    }

    #[test]
    fn cross_field_validation() {
        let mismatch = SINE.replace("\"kind\": \"trajectory\"", "\"kind\": \"density\"");
        assert!(ExperimentConfig::from_json(&mismatch).unwrap_err().to_string().contains("dataset.type"));
        let ode_penalty = SINE
            .replace(r#""type": "flow", "architecture": "coupling", "layers": 2, "hidden": [16]"#, r#""type": "ode""#)
            .replacen('{', "{\"autonomous_penalty\": 0.1,", 1);
        assert!(ExperimentConfig::from_json(&ode_penalty).unwrap_err().to_string().contains("autonomous_penalty"));
        let resnet_linear = SINE.replace(
            r#""architecture": "coupling""#,
            r#""architecture": "resnet", "embedding": {"type": "linear"}"#,
        );
        let err = ExperimentConfig::from_json(&resnet_linear).unwrap_err();
        assert!(err.to_string().contains("model.embedding"), "{err}");
        let lr = SINE.replace(r#""epochs": 2"#, r#""epochs": 2, "lr": -1"#);
        assert!(ExperimentConfig::from_json(&lr).unwrap_err().to_string().contains("optimizer.lr"));
    }

    #[test]
    fn hash_tracks_meaningful_fields_only() {
        let c = ExperimentConfig::from_json(SINE).unwrap();
        let mut renamed = c.clone();
        renamed.name = "other".into();
        assert_eq!(c.hash(), renamed.hash());
        let explicit = SINE.replace(r#""epochs": 2"#, r#""epochs": 2, "lr": 0.001, "weight_decay": 0.0001"#);
        assert_eq!(ExperimentConfig::from_json(&explicit).unwrap().hash(), c.hash());
        let mut seeded = c.clone();
        seeded.seed = 1;
        assert_ne!(seeded.hash(), c.hash());
        let mut lr = c.clone();
        lr.optimizer.lr = 2e-3;
        assert_ne!(lr.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }
}
