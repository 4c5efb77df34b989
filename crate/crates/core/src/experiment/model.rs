//! Trainable models behind one enum, with their losses and evaluation paths.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{rng_for, Split, TrajectoryDataset};
use crate::density::{adaptive_integral, AdaptiveIntegral, Cnf, CouplingDensity, Grid2, Refine};
use crate::error::{Error, Result};
use crate::flows::{FlowStack, InverseConfig};
use crate::ode::{batched_solve, Dynamics, Shifted, SolverConfig, SolverStats, VectorField};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::tpp::{
    nll_continuous, nll_mixture, EventEncoder, InterEventTransform, IntensityHead, McConfig, MixtureDecoder,
};

use super::config::{DecoderSpec, ExperimentConfig, ExperimentKind, ModelSpec};
use super::data::{split_index, ExperimentData};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Rows per no-grad evaluation chunk.
const EVAL_CHUNK: usize = 2000;
/// Sequences per evaluation chunk for point processes.
const EVAL_SEQ_CHUNK: usize = 100;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TppDecoder {
    Mixture(MixtureDecoder),
    Intensity { head: IntensityHead, mc: McConfig },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Flow(FlowStack),
    Ode {
        field: VectorField,
        solver: SolverConfig,
    },
    Tpp {
        encoder: EventEncoder,
        decoder: TppDecoder,
        transform: InterEventTransform,
    },
    CouplingDensity(CouplingDensity),
    Cnf(Cnf),
}

/// Loss of one batch, plus solver work spent on it.
pub struct BatchLoss {
    pub loss: Var,
    pub stats: SolverStats,
}

/// Result of evaluating a whole split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    /// MSE for trajectories, per-event NLL for events, per-sample NLL for densities.
    pub loss: f64,
    pub evaluations: usize,
}

impl Model {
    pub fn build<R: Rng>(cfg: &ExperimentConfig, data: &ExperimentData, ps: &mut ParamSet, rng: &mut R) -> Result<Self> {
        if data.kind() != cfg.kind {
            return Err(Error::config(
                "kind",
                format!("config is a `{}` experiment but the data is `{}`", cfg.kind.name(), data.kind().name()),
            ));
        }
        let dim = data.dim();
        Ok(match &cfg.model {
            ModelSpec::Flow { .. } => {
                let spec = cfg.model.flow_spec(dim.expect("trajectory data")).expect("flow model");
                Model::Flow(FlowStack::new(ps, "flow", &spec, rng)?)
            }
            ModelSpec::Ode { hidden, activation, solver } => Model::Ode {
                field: VectorField::new(ps, "ode", dim.expect("trajectory data"), hidden, *activation, rng)?,
                solver: *solver,
            },
            ModelSpec::Tpp { encoder, decoder, normalize, log1p } => {
                let ExperimentData::Events { splits, .. } = data else { unreachable!("kind checked") };
                let transform = InterEventTransform::fit(&splits[0].sequences, *normalize, *log1p)?;
                let enc = EventEncoder::new(ps, "encoder", encoder, rng)?;
                let decoder = match decoder {
                    DecoderSpec::Mixture { components } => {
                        TppDecoder::Mixture(MixtureDecoder::new(ps, "decoder", encoder.hidden_dim, *components, rng)?)
                    }
                    DecoderSpec::Intensity { hidden, mc } => TppDecoder::Intensity {
                        head: IntensityHead::new(ps, "intensity", encoder.hidden_dim, hidden, rng)?,
                        mc: *mc,
                    },
                };
                Model::Tpp { encoder: enc, decoder, transform }
            }
            ModelSpec::CouplingDensity { layers, hidden } => {
                Model::CouplingDensity(CouplingDensity::new(ps, "density", 2, *layers, hidden, rng)?)
            }
            ModelSpec::Cnf { hidden, solver } => Model::Cnf(Cnf::new(ps, "cnf", 2, hidden, *solver, rng)?),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Flow(_) => "flow",
            Model::Ode { .. } => "ode",
            Model::Tpp { .. } => "tpp",
            Model::CouplingDensity(_) => "coupling_density",
            Model::Cnf(_) => "cnf",
        }
    }

    /// Predicted states for rows `(start_i, t_i, x0_i)` on a live tape.
    pub fn predict_tape(
        &self,
        g: &mut Tape,
        start: &[f64],
        t: &[f64],
        x0: Var,
    ) -> Result<(Var, SolverStats)> {
        let shifted = start.iter().any(|&s| s != 0.0);
        match self {
            Model::Flow(flow) => {
                let base = if shifted {
                    let s = g.constant(Tensor::column(start));
                    flow.inverse(g, s, x0, InverseConfig::default())?
                } else {
                    x0
                };
                let tv = g.constant(Tensor::column(t));
                Ok((flow.forward(g, tv, base), SolverStats::default()))
            }
            Model::Ode { field, solver } => {
                let sol = if shifted {
                    let mut dur = Vec::with_capacity(t.len());
                    for (&a, &b) in start.iter().zip(t) {
                        if b < a {
                            return Err(Error::Invalid(format!("query time {b} precedes its start {a}")));
                        }
                        dur.push(b - a);
                    }
                    let f = Shifted { inner: field as &dyn Dynamics, offset: Tensor::column(start) };
                    batched_solve(g, &f, x0, &dur, solver)?
                } else {
                    batched_solve(g, field as &dyn Dynamics, x0, t, solver)?
                };
                Ok((sol.state, sol.stats))
            }
            _ => Err(Error::Invalid(format!("a {} model does not predict trajectories", self.kind_name()))),
        }
    }

    /// Predictions for plain tensors, evaluated in chunks without a gradient tape.
    pub fn predict(&self, ps: &ParamSet, start: &[f64], t: &[f64], x0: &Tensor) -> Result<(Tensor, SolverStats)> {
        let n = x0.rows();
        if start.len() != n || t.len() != n {
            return Err(Error::shape("predict", format!("{n} states, {} starts, {} times", start.len(), t.len())));
        }
        if let Some(d) = self.state_dim() {
            if x0.cols() != d {
                return Err(Error::shape("predict", format!("model dimension {d}, data dimension {}", x0.cols())));
            }
        }
        let mut parts = Vec::new();
        let mut stats = SolverStats::default();
        for lo in (0..n).step_by(EVAL_CHUNK) {
            let hi = (lo + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            let mut g = Tape::no_grad(ps);
            let x = g.constant(x0.select_rows(&idx));
            let (y, s) = self.predict_tape(&mut g, &start[lo..hi], &t[lo..hi], x)?;
            add_stats(&mut stats, s);
            parts.push(g.value(y).clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok((Tensor::vcat(&refs), stats))
    }

    pub fn state_dim(&self) -> Option<usize> {
        match self {
            Model::Flow(f) => Some(f.dim),
            Model::Ode { field, .. } => Some(field.dim),
            Model::Tpp { .. } => None,
            Model::CouplingDensity(d) => Some(d.dim),
            Model::Cnf(c) => Some(c.dim()),
        }
    }

    /// Training loss on the units `idx` of the training split.
    ///
    /// `penalty` is the semigroup weight γ; it only applies to flows.
    pub fn batch_loss<R: Rng>(
        &self,
        g: &mut Tape,
        data: &ExperimentData,
        idx: &[usize],
        penalty: f64,
        rng: &mut R,
    ) -> Result<BatchLoss> {
        match (self, data) {
            (Model::Flow(_) | Model::Ode { .. }, ExperimentData::Trajectory(s)) => {
                let obs = s.train.observations(idx);
                let x0 = g.constant(obs.x0.clone());
                let (pred, stats) = self.predict_tape(g, &obs.start, &obs.t, x0)?;
                let target = g.constant(obs.target);
                let diff = g.sub(pred, target);
                let sq = g.square(diff);
                let mut loss = g.mean(sq);
                if let (Model::Flow(flow), true) = (self, penalty > 0.0) {
                    let p = flow.autonomous_penalty(g, &obs.t, x0, rng);
                    let p = g.scale(p, penalty);
                    loss = g.add(loss, p);
                }
                Ok(BatchLoss { loss, stats })
            }
            (Model::Tpp { encoder, decoder, transform }, ExperimentData::Events { splits, .. }) => {
                let seqs: Vec<&[f64]> = idx.iter().map(|&i| splits[0].sequences[i].as_slice()).collect();
                let (loss, stats) = tpp_loss(g, encoder, decoder, transform, &seqs, rng)?;
                Ok(BatchLoss { loss, stats })
            }
            (Model::CouplingDensity(_) | Model::Cnf(_), ExperimentData::Density { splits, .. }) => {
                let x = splits[0].select_rows(idx);
                let unit = Uniform::new(0.0, 1.0).expect("valid range");
                let times: Vec<f64> = idx.iter().map(|_| unit.sample(rng)).collect();
                let (lp, stats) = self.density_log_prob(g, &x, &times)?;
                let m = g.mean(lp);
                Ok(BatchLoss { loss: g.neg(m), stats })
            }
            _ => Err(Error::Invalid(format!("a {} model cannot train on this data", self.kind_name()))),
        }
    }

    fn density_log_prob(&self, g: &mut Tape, x: &Tensor, times: &[f64]) -> Result<(Var, SolverStats)> {
        let xv = g.constant(x.clone());
        match self {
            Model::CouplingDensity(d) => {
                let t = g.constant(Tensor::column(times));
                Ok((d.log_prob(g, xv, t)?, SolverStats::default()))
            }
            Model::Cnf(c) => c.log_prob(g, xv, times),
            _ => Err(Error::Invalid(format!("a {} model is not a density", self.kind_name()))),
        }
    }

    /// Log-densities at `x` and per-row times, without gradients.
    /// Evaluated in chunks, since a CNF keeps every solver stage on its tape.
    pub fn density_values(&self, ps: &ParamSet, x: &Tensor, times: &[f64]) -> Result<Vec<f64>> {
        let chunk = match self {
            Model::CouplingDensity(_) => 20_000,
            Model::Cnf(_) => 4000,
            _ => return Err(Error::Invalid(format!("a {} model is not a density", self.kind_name()))),
        };
        if times.len() != x.rows() {
            return Err(Error::shape("density", format!("{} times for {} points", times.len(), x.rows())));
        }
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(chunk) {
            let end = (start + chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let xs = x.select_rows(&idx);
            out.extend(match self {
                Model::CouplingDensity(d) => d.log_prob_values(ps, &xs, &times[start..end])?,
                Model::Cnf(c) => c.log_prob_values(ps, &xs, &times[start..end])?,
                _ => unreachable!(),
            });
        }
        Ok(out)
    }

    /// Loss on a whole split, with the evaluation randomness (density times,
    /// Monte-Carlo nodes) drawn from a stream fixed by `seed` and the split.
    pub fn evaluate(&self, ps: &ParamSet, data: &ExperimentData, split: Split, seed: u64) -> Result<SplitEval> {
        let missing = || Error::Invalid(format!("this dataset has no {} split", split.as_str()));
        match (self, data) {
            (Model::Flow(_) | Model::Ode { .. }, ExperimentData::Trajectory(s)) => {
                let d = s.get(split).ok_or_else(missing)?;
                self.trajectory_mse(ps, d)
            }
            (Model::Tpp { encoder, decoder, transform }, ExperimentData::Events { splits, .. }) => {
                let ds = &splits[split_index(split).ok_or_else(missing)?];
                let mut rng = rng_for(seed, 1000 + split as u64);
                let (mut total, mut events, mut evals) = (0.0, 0usize, 0usize);
                for chunk in ds.sequences.chunks(EVAL_SEQ_CHUNK) {
                    let seqs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
                    let n_ev: usize = chunk.iter().map(Vec::len).sum();
                    let mut g = Tape::no_grad(ps);
                    let (loss, stats) = tpp_loss(&mut g, encoder, decoder, transform, &seqs, &mut rng)?;
                    total += g.scalar(loss) * n_ev as f64;
                    events += n_ev;
                    evals += stats.evaluations;
                }
                if events == 0 {
                    return Err(Error::Invalid(format!("the {} split has no events", split.as_str())));
                }
                Ok(SplitEval { loss: total / events as f64, evaluations: evals })
            }
            (Model::CouplingDensity(_) | Model::Cnf(_), ExperimentData::Density { splits, .. }) => {
                let x = &splits[split_index(split).ok_or_else(missing)?];
                let mut rng = rng_for(seed, 1000 + split as u64);
                let unit = Uniform::new(0.0, 1.0).expect("valid range");
                let times: Vec<f64> = (0..x.rows()).map(|_| unit.sample(&mut rng)).collect();
                let mut total = 0.0;
                let mut evals = 0;
                for lo in (0..x.rows()).step_by(EVAL_CHUNK) {
                    let hi = (lo + EVAL_CHUNK).min(x.rows());
                    let idx: Vec<usize> = (lo..hi).collect();
                    let mut g = Tape::no_grad(ps);
                    let (lp, stats) = self.density_log_prob(&mut g, &x.select_rows(&idx), &times[lo..hi])?;
                    total -= g.value(lp).sum();
                    evals += stats.evaluations;
                }
                Ok(SplitEval { loss: total / x.rows().max(1) as f64, evaluations: evals })
            }
            _ => Err(Error::Invalid(format!("a {} model cannot evaluate this data", self.kind_name()))),
        }
    }

    fn trajectory_mse(&self, ps: &ParamSet, d: &TrajectoryDataset) -> Result<SplitEval> {
        let obs = d.all_observations();
        let (pred, stats) = self.predict(ps, &obs.start, &obs.t, &obs.x0)?;
        let diff = pred.sub(&obs.target);
        let mse = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len().max(1) as f64;
        Ok(SplitEval { loss: mse, evaluations: stats.evaluations })
    }

    /// Mean semigroup violation over the training observations,
    /// with split times drawn from a stream fixed by `seed`.
    pub fn semigroup_violation(&self, ps: &ParamSet, data: &ExperimentData, seed: u64) -> Result<f64> {
        let (Model::Flow(flow), ExperimentData::Trajectory(s)) = (self, data) else {
            return Err(Error::Invalid("the semigroup penalty is defined for flows on trajectory data".into()));
        };
        let obs = s.train.all_observations();
        let mut rng = rng_for(seed, 2000);
        let mut g = Tape::no_grad(ps);
        let x0 = g.constant(obs.x0);
        let p = flow.autonomous_penalty(&mut g, &obs.t, x0, &mut rng);
        Ok(g.scalar(p))
    }

    /// `∫ p(x, t) dx` over `grid` for a 2-d density model.
    pub fn density_integral(&self, ps: &ParamSet, grid: Grid2, refine: Refine, t: f64) -> Result<AdaptiveIntegral> {
        adaptive_integral(grid, t, refine, &mut |x, times| self.density_values(ps, x, times))
    }
}

fn tpp_loss<R: Rng>(
    g: &mut Tape,
    encoder: &EventEncoder,
    decoder: &TppDecoder,
    transform: &InterEventTransform,
    seqs: &[&[f64]],
    rng: &mut R,
) -> Result<(Var, SolverStats)> {
    match decoder {
        TppDecoder::Mixture(dec) => nll_mixture(g, encoder, dec, transform, seqs),
        TppDecoder::Intensity { head, mc } => {
            let horizon: Vec<f64> = seqs.iter().map(|s| s.last().copied().unwrap_or(0.0)).collect();
            let events: usize = seqs.iter().map(|s| s.len()).sum();
            let (total, stats) = nll_continuous(g, encoder, head, transform, seqs, &horizon, *mc, rng)?;
            Ok((g.scale(total, 1.0 / events.max(1) as f64), stats))
        }
    }
}

pub(crate) fn add_stats(acc: &mut SolverStats, s: SolverStats) {
    acc.accepted += s.accepted;
    acc.rejected += s.rejected;
    acc.evaluations += s.evaluations;
}

/// Everything needed to reload a trained model bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub model: Model,
    pub params: ParamSet,
}

impl ModelFile {
    pub fn new(config: &ExperimentConfig, model: Model, params: ParamSet) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            kind: config.kind,
            config_hash: config.hash(),
            config: config.clone(),
            model,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text).map_err(|e| Error::config("model file", e.to_string()))?;
        if f.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("model file version {} (expected {MODEL_SCHEMA_VERSION})", f.schema_version),
            ));
        }
        Ok(f)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
