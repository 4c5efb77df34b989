//! Temporal point processes with continuous-time hidden states.
//!
//! An encoder carries a hidden state `h` through a sequence: between events
//! `h` evolves (by a flow, an ODE, or not at all), and at each event a GRU
//! cell folds in the transformed inter-event time. Two decoders turn states
//! into likelihoods: a log-normal mixture over the next inter-event time, and
//! a continuous intensity integrated by Monte Carlo.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{Architecture, FlowSpec, FlowStack};
use crate::nn::{Activation, GruCell, Mlp, MlpSpec};
use crate::ode::{batched_solve, Dynamics, SolverConfig, SolverStats, VectorField};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Floor added to mixture scales after the softplus.
pub const SCALE_FLOOR: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Maps raw inter-event times `τ` to model space: `τ/τ̄` and optionally
/// `log(1 + τ/τ̄)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterEventTransform {
    pub mean: f64,
    pub normalize: bool,
    pub log1p: bool,
}

impl InterEventTransform {
    pub fn identity() -> Self {
        Self { mean: 1.0, normalize: false, log1p: false }
    }

    /// Mean inter-event time over `sequences` (times measured from 0).
    pub fn fit(sequences: &[Vec<f64>], normalize: bool, log1p: bool) -> Result<Self> {
        let (mut total, mut count) = (0.0, 0usize);
        for s in sequences {
            if let Some(last) = s.last() {
                total += last;
                count += s.len();
            }
        }
        let mean = total / count.max(1) as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Invalid("cannot fit an inter-event mean on empty data".into()));
        }
        Ok(Self { mean, normalize, log1p })
    }

    /// Time unit used for the hidden-state evolution.
    pub fn scale(&self) -> f64 {
        if self.normalize {
            self.mean
        } else {
            1.0
        }
    }

    pub fn apply(&self, tau: f64) -> f64 {
        let u = tau / self.scale();
        if self.log1p {
            u.ln_1p()
        } else {
            u
        }
    }

    /// `log |dy/dτ|` of [`apply`](Self::apply).
    pub fn log_jacobian(&self, tau: f64) -> f64 {
        let u = tau / self.scale();
        let mut lj = -self.scale().ln();
        if self.log1p {
            lj -= u.ln_1p();
        }
        lj
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    DiscreteGru,
    GruFlow,
    ResnetFlow,
    CouplingFlow,
    JumpOde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    /// Flow layers for flow encoders.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Widths of the flow or vector-field networks.
    #[serde(default = "default_net")]
    pub hidden: Vec<usize>,
    /// Solver for the jump ODE.
    #[serde(default)]
    pub solver: Option<SolverConfig>,
}

fn default_layers() -> usize {
    1
}

fn default_net() -> Vec<usize> {
    vec![64]
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, hidden_dim: usize) -> Self {
        Self { kind, hidden_dim, layers: default_layers(), hidden: default_net(), solver: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("encoder.hidden_dim", "must be positive"));
        }
        if self.layers == 0 {
            return Err(Error::config("encoder.layers", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("encoder.hidden", "widths must be positive"));
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        Ok(())
    }
}

/// How the hidden state moves between events.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evolution {
    Constant,
    Flow(FlowStack),
    Ode { field: VectorField, solver: SolverConfig },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventEncoder {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    /// Pre-activation of the initial state; `h_0 = tanh(h0)`.
    pub h0: ParamId,
    pub cell: GruCell,
    pub evolution: Evolution,
}

/// Hidden states along a batch of equal-length sequences.
pub struct Encoded {
    /// `post[i]` is the state right after event `i` (`post[0] = h_0`).
    pub post: Vec<Var>,
    /// `pre[i]` is the state just before event `i + 1`.
    pub pre: Vec<Var>,
    /// Raw inter-event times, `tau[i][b]` for event `i + 1` of sequence `b`.
    pub tau: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

impl EventEncoder {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden_dim;
        let h0 = ps.add(format!("{name}.h0"), Tensor::zeros(1, h));
        let cell = GruCell::new(ps, &format!("{name}.cell"), 1, h, rng);
        let flow = |arch| {
            FlowSpec::new(arch, h, spec.layers).hidden(spec.hidden.clone())
        };
        let evolution = match spec.kind {
            EncoderKind::DiscreteGru => Evolution::Constant,
            EncoderKind::GruFlow => Evolution::Flow(FlowStack::new(ps, &format!("{name}.flow"), &flow(Architecture::Gru), rng)?),
            EncoderKind::ResnetFlow => {
                Evolution::Flow(FlowStack::new(ps, &format!("{name}.flow"), &flow(Architecture::Resnet), rng)?)
            }
            EncoderKind::CouplingFlow => {
                Evolution::Flow(FlowStack::new(ps, &format!("{name}.flow"), &flow(Architecture::Coupling), rng)?)
            }
            EncoderKind::JumpOde => Evolution::Ode {
                field: VectorField::new(ps, &format!("{name}.field"), h, &spec.hidden, Activation::Tanh, rng)?,
                solver: spec.solver.unwrap_or(SolverConfig::dopri5(1e-3, 1e-4)),
            },
        };
        Ok(Self { kind: spec.kind, hidden_dim: h, h0, cell, evolution })
    }

    /// Moves each row of `h` forward by its own `dt` (model time units).
    pub fn evolve(&self, g: &mut Tape, h: Var, dt: &[f64], stats: &mut SolverStats) -> Result<Var> {
        match &self.evolution {
            Evolution::Constant => Ok(h),
            Evolution::Flow(flow) => {
                let t = g.constant(Tensor::column(dt));
                Ok(flow.forward(g, t, h))
            }
            Evolution::Ode { field, solver } => {
                let sol = batched_solve(g, field as &dyn Dynamics, h, dt, solver)?;
                stats.accepted += sol.stats.accepted;
                stats.rejected += sol.stats.rejected;
                stats.evaluations += sol.stats.evaluations;
                Ok(sol.state)
            }
        }
    }

    pub fn initial_state(&self, g: &mut Tape, n: usize) -> Var {
        let p = g.param(self.h0);
        let p = g.tanh(p);
        g.broadcast_rows(p, n)
    }

    /// Runs the encoder over sequences that all have the same length.
    pub fn encode(&self, g: &mut Tape, xform: &InterEventTransform, seqs: &[&[f64]]) -> Result<Encoded> {
        let n = seqs.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let len = seqs[0].len();
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Invalid("sequences in a batch must have equal length".into()));
        }
        let mut tau = Vec::with_capacity(len);
        for i in 0..len {
            let mut col = Vec::with_capacity(n);
            for (b, s) in seqs.iter().enumerate() {
                let prev = if i == 0 { 0.0 } else { s[i - 1] };
                let d = s[i] - prev;
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::Invalid(format!(
                        "sequence {b}: event {i} does not increase the time"
                    )));
                }
                col.push(d);
            }
            tau.push(col);
        }
        let mut stats = SolverStats::default();
        let mut h = self.initial_state(g, n);
        let mut post = vec![h];
        let mut pre = Vec::with_capacity(len);
        for col in &tau {
            let dt: Vec<f64> = col.iter().map(|d| d / xform.scale()).collect();
            let hbar = self.evolve(g, h, &dt, &mut stats)?;
            pre.push(hbar);
            let feats: Vec<f64> = col.iter().map(|&d| xform.apply(d)).collect();
            let x = g.constant(Tensor::column(&feats));
            h = self.cell.forward(g, hbar, x);
            post.push(h);
        }
        Ok(Encoded { post, pre, tau, stats })
    }
}

/// Per-row log-density of a log-normal mixture at `y` (`n × 1`).
/// `logits`, `means` and `scales` are `n × K`.
pub fn mixture_log_prob(g: &mut Tape, logits: Var, means: Var, scales: Var, y: Var) -> Var {
    let lse = g.logsumexp_rows(logits);
    let neg = g.neg(lse);
    let log_w = g.add_col(logits, neg);
    let log_y = g.log(y);
    let neg_m = g.neg(means);
    let diff = g.add_col(neg_m, log_y);
    let z = g.div(diff, scales);
    let z2 = g.square(z);
    let quad = g.scale(z2, -0.5);
    let log_s = g.log(scales);
    let comp = g.sub(quad, log_s);
    let comp = g.add_scalar(comp, -HALF_LN_2PI);
    let joint = g.add(comp, log_w);
    let lp = g.logsumexp_rows(joint);
    g.sub(lp, log_y)
}

/// Log-normal mixture over the next transformed inter-event time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureDecoder {
    pub components: usize,
    pub net: Mlp,
}

pub struct MixtureParams {
    pub logits: Var,
    pub means: Var,
    pub scales: Var,
}

impl MixtureDecoder {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        hidden_dim: usize,
        components: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::config("decoder.components", "must be positive"));
        }
        let net = Mlp::new(ps, name, MlpSpec::new(hidden_dim, vec![], 3 * components), rng)?;
        Ok(Self { components, net })
    }

    pub fn params(&self, g: &mut Tape, h: Var) -> MixtureParams {
        let k = self.components;
        let out = self.net.forward(g, h);
        let logits = g.cols(out, 0, k);
        let means = g.cols(out, k, 2 * k);
        let raw = g.cols(out, 2 * k, 3 * k);
        let scales = g.softplus(raw);
        let scales = g.add_scalar(scales, SCALE_FLOOR);
        MixtureParams { logits, means, scales }
    }
}

/// Mean per-event NLL in raw time units, including the change of variables
/// from `τ` to the transformed time.
pub fn nll_mixture(
    g: &mut Tape,
    enc: &EventEncoder,
    dec: &MixtureDecoder,
    xform: &InterEventTransform,
    seqs: &[&[f64]],
) -> Result<(Var, SolverStats)> {
    let encoded = enc.encode(g, xform, seqs)?;
    if encoded.tau.is_empty() {
        return Err(Error::Invalid("sequences must contain at least one event".into()));
    }
    let len = encoded.tau.len();
    let states = g.vcat(&encoded.post[..len]);
    let p = dec.params(g, states);
    let taus: Vec<f64> = encoded.tau.iter().flatten().copied().collect();
    let y: Vec<f64> = taus.iter().map(|&t| xform.apply(t)).collect();
    let jac: f64 = taus.iter().map(|&t| xform.log_jacobian(t)).sum();
    let y = g.constant(Tensor::column(&y));
    let lp = mixture_log_prob(g, p.logits, p.means, p.scales, y);
    let total = g.sum(lp);
    let total = g.add_scalar(total, jac);
    Ok((g.scale(total, -1.0 / taus.len() as f64), encoded.stats))
}

/// `λ(t) = softplus(g(h(t)))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntensityHead {
    pub net: Mlp,
}

impl IntensityHead {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, hidden_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(hidden_dim, hidden.to_vec(), 1).activation(Activation::Tanh);
        Ok(Self { net: Mlp::new(ps, name, spec, rng)? })
    }

    pub fn intensity(&self, g: &mut Tape, h: Var) -> Var {
        let out = self.net.forward(g, h);
        let lam = g.softplus(out);
        // Keeps log λ finite when the softplus underflows.
        g.add_scalar(lam, 1e-12)
    }
}

/// Monte Carlo settings for the compensator `∫ λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    /// Samples per inter-event interval.
    pub n_mc: usize,
    /// One sample per equal-width stratum instead of i.i.d. uniform draws.
    pub stratified: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_mc: 20, stratified: true }
    }
}

/// Continuous-intensity NLL summed over the batch, in raw time units.
///
/// Each sequence is observed on `[0, horizon[b]]` (at least its last event).
/// The compensator is estimated from uniform samples inside every
/// inter-event interval, all evolved in one batched call.
#[allow(clippy::too_many_arguments)]
pub fn nll_continuous<R: Rng>(
    g: &mut Tape,
    enc: &EventEncoder,
    head: &IntensityHead,
    xform: &InterEventTransform,
    seqs: &[&[f64]],
    horizon: &[f64],
    mc: McConfig,
    rng: &mut R,
) -> Result<(Var, SolverStats)> {
    let n_mc = mc.n_mc;
    if n_mc == 0 {
        return Err(Error::config("n_mc", "need at least one sample"));
    }
    if horizon.len() != seqs.len() {
        return Err(Error::Invalid("one horizon per sequence expected".into()));
    }
    let encoded = enc.encode(g, xform, seqs)?;
    let n = seqs.len();
    let len = encoded.tau.len();
    let scale = xform.scale();

    // Interval i ∈ 0..=len starts at post[i]; the last one runs to the horizon.
    let mut widths = encoded.tau.clone();
    let mut tail = Vec::with_capacity(n);
    for (b, s) in seqs.iter().enumerate() {
        let last = s.last().copied().unwrap_or(0.0);
        if horizon[b] < last {
            return Err(Error::Invalid(format!("horizon of sequence {b} precedes its last event")));
        }
        tail.push(horizon[b] - last);
    }
    widths.push(tail);

    let mut blocks = Vec::with_capacity(len + 1);
    let mut offsets = Vec::with_capacity((len + 1) * n * n_mc);
    let mut weights = Vec::with_capacity((len + 1) * n * n_mc);
    for (i, w) in widths.iter().enumerate() {
        let rows: Vec<usize> = (0..n).flat_map(|b| std::iter::repeat_n(b, n_mc)).collect();
        blocks.push(g.select_rows(encoded.post[i], &rows));
        for &wb in w {
            for k in 0..n_mc {
                let u: f64 = rng.random();
                let frac = if mc.stratified { (k as f64 + u) / n_mc as f64 } else { u };
                offsets.push(wb * frac / scale);
                weights.push(wb / scale / n_mc as f64);
            }
        }
    }
    let start = g.vcat(&blocks);
    let mut stats = encoded.stats;
    let hs = enc.evolve(g, start, &offsets, &mut stats)?;
    let lam = head.intensity(g, hs);
    let wcol = g.constant(Tensor::column(&weights));
    let weighted = g.mul(lam, wcol);
    let integral = g.sum(weighted);

    let mut total = integral;
    if len > 0 {
        let pre = g.vcat(&encoded.pre);
        let lam_events = head.intensity(g, pre);
        let log_lam = g.log(lam_events);
        let s = g.sum(log_lam);
        total = g.sub(total, s);
    }
    // λ_raw = λ_model / scale at every event.
    Ok((g.add_scalar(total, (n * len) as f64 * scale.ln()), stats))
}
