//! Neural flows: direct parameterizations of ODE solution curves.
//!
//! Every layer maps `(t, x)` to `F(t, x)` with `F(0, x) = x` and `F(t, ·)`
//! invertible. Batched methods take `t` as an `n × 1` column so each row may
//! carry its own time.

pub mod coupling;
pub mod embedding;
pub mod gru;
pub mod linear;
pub mod resnet;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use coupling::CouplingFlow;
pub use embedding::{EmbeddingKind, TimeEmbedding};
pub use gru::GruFlow;
pub use linear::{matrix_exp, matrix_exp_tape, LinearFlow};
pub use resnet::ResNetFlow;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Stopping rule for fixed-point inversion of residual layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseConfig {
    /// Sup-norm change between iterates that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Solves `x = y − residual(x)` by iteration starting from `y`.
///
/// With gradients enabled the iterations stay on the tape, so the result is
/// differentiable; otherwise each step is collapsed to a constant.
fn fixed_point(
    g: &mut Tape,
    y: Var,
    cfg: InverseConfig,
    mut residual: impl FnMut(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let mut x = y;
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let mark = g.len();
        let r = residual(g, x);
        let mut next = g.sub(y, r);
        change = g.value(next).sub(g.value(x)).max_abs();
        if !change.is_finite() {
            break;
        }
        if !g.grad_enabled() {
            let value = g.value(next).clone();
            g.truncate(mark);
            next = g.constant(value);
        }
        x = next;
        if change < cfg.tol {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual: change,
        last_iterate: g.value(x).data().to_vec(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FlowLayer {
    ResNet(ResNetFlow),
    Gru(GruFlow),
    Coupling(CouplingFlow),
    Linear(LinearFlow),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::ResNet(l) => l.dim,
            FlowLayer::Gru(l) => l.dim,
            FlowLayer::Coupling(l) => l.dim,
            FlowLayer::Linear(l) => l.dim,
        }
    }

    /// Whether the inverse is closed-form rather than iterative.
    pub fn has_analytic_inverse(&self) -> bool {
        matches!(self, FlowLayer::Coupling(_) | FlowLayer::Linear(_))
    }

    pub fn forward(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        match self {
            FlowLayer::ResNet(l) => l.forward(g, t, x),
            FlowLayer::Gru(l) => l.forward(g, t, x),
            FlowLayer::Coupling(l) => l.forward(g, t, x),
            FlowLayer::Linear(l) => l.forward(g, t, x),
        }
    }

    pub fn inverse(&self, g: &mut Tape, t: Var, y: Var, cfg: InverseConfig) -> Result<Var> {
        match self {
            FlowLayer::ResNet(l) => fixed_point(g, y, cfg, |g, x| l.residual(g, t, x)),
            FlowLayer::Gru(l) => fixed_point(g, y, cfg, |g, x| l.residual(g, t, x)),
            FlowLayer::Coupling(l) => Ok(l.inverse(g, t, y)),
            FlowLayer::Linear(l) => Ok(l.inverse(g, t, y)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet,
    Gru,
    Coupling,
    Linear,
}

/// Architecture description from which a [`FlowStack`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub architecture: Architecture,
    pub dim: usize,
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Defaults to tanh-linear for residual layers and linear for coupling.
    #[serde(default)]
    pub embedding: Option<EmbeddingKind>,
    #[serde(default = "default_coeff")]
    pub spectral_coeff: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Start coupling layers at the identity map.
    #[serde(default)]
    pub zero_init: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_coeff() -> f64 {
    0.9
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl FlowSpec {
    pub fn new(architecture: Architecture, dim: usize, layers: usize) -> Self {
        Self {
            architecture,
            dim,
            layers,
            hidden: default_hidden(),
            embedding: None,
            spectral_coeff: default_coeff(),
            activation: default_activation(),
            zero_init: false,
        }
    }

    pub fn hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn embedding(mut self, kind: EmbeddingKind) -> Self {
        self.embedding = Some(kind);
        self
    }

    pub fn zero_init(mut self, on: bool) -> Self {
        self.zero_init = on;
        self
    }

    pub fn resolved_embedding(&self) -> EmbeddingKind {
        self.embedding.unwrap_or(match self.architecture {
            Architecture::Coupling | Architecture::Linear => EmbeddingKind::Linear,
            Architecture::Resnet | Architecture::Gru => EmbeddingKind::TanhLinear,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "widths must be positive"));
        }
        if !(self.spectral_coeff > 0.0 && self.spectral_coeff < 1.0) {
            return Err(Error::config("spectral_coeff", "must lie in (0, 1)"));
        }
        let bounded = self.resolved_embedding().is_bounded();
        if matches!(self.architecture, Architecture::Resnet | Architecture::Gru) && !bounded {
            return Err(Error::config("embedding", "residual flows need a bounded embedding"));
        }
        if matches!(self.architecture, Architecture::Resnet | Architecture::Gru)
            && self.activation != Activation::Tanh
        {
            return Err(Error::config("activation", "contractive networks use tanh"));
        }
        Ok(())
    }
}

/// `F = F_n ∘ … ∘ F_1`, applied first to last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowStack {
    pub dim: usize,
    pub layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn from_layers(layers: Vec<FlowLayer>) -> Result<Self> {
        let dim = layers
            .first()
            .ok_or_else(|| Error::Invalid("a flow stack needs at least one layer".into()))?
            .dim();
        if layers.iter().any(|l| l.dim() != dim) {
            return Err(Error::Invalid("flow layers disagree on dimension".into()));
        }
        Ok(Self { dim, layers })
    }

    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, spec: &FlowSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let emb = spec.resolved_embedding();
        let mut layers = Vec::with_capacity(spec.layers);
        for k in 0..spec.layers {
            let lname = format!("{name}.{k}");
            let layer = match spec.architecture {
                Architecture::Resnet => FlowLayer::ResNet(ResNetFlow::new(
                    ps,
                    &lname,
                    spec.dim,
                    &spec.hidden,
                    emb,
                    spec.spectral_coeff,
                    rng,
                )?),
                Architecture::Gru => FlowLayer::Gru(GruFlow::new(
                    ps,
                    &lname,
                    spec.dim,
                    &spec.hidden,
                    emb,
                    spec.spectral_coeff,
                    rng,
                )?),
                Architecture::Coupling => {
                    let (a, _) = CouplingFlow::alternating(spec.dim, k);
                    FlowLayer::Coupling(CouplingFlow::new(
                        ps,
                        &lname,
                        spec.dim,
                        a,
                        &spec.hidden,
                        spec.activation,
                        emb,
                        spec.zero_init,
                        rng,
                    )?)
                }
                Architecture::Linear => FlowLayer::Linear(LinearFlow::new(ps, &lname, spec.dim, rng)?),
            };
            layers.push(layer);
        }
        Self::from_layers(layers)
    }

    pub fn has_analytic_inverse(&self) -> bool {
        self.layers.iter().all(FlowLayer::has_analytic_inverse)
    }

    pub fn forward(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| l.forward(g, t, h))
    }

    pub fn inverse(&self, g: &mut Tape, t: Var, y: Var, cfg: InverseConfig) -> Result<Var> {
        let mut x = y;
        for l in self.layers.iter().rev() {
            x = l.inverse(g, t, x, cfg)?;
        }
        Ok(x)
    }

    /// Forward pass with `log|det ∂F/∂x|` per row; analytic layers only.
    pub fn forward_log_det(&self, g: &mut Tape, t: Var, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let mut total: Option<Var> = None;
        for l in &self.layers {
            let (next, ld) = match l {
                FlowLayer::Coupling(c) => c.forward_log_det(g, t, h),
                FlowLayer::Linear(lin) => (lin.forward(g, t, h), lin.log_det(g, t)),
                _ => return Err(Error::Invalid("log-determinant needs coupling or linear layers".into())),
            };
            h = next;
            total = Some(match total {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        Ok((h, total.expect("non-empty stack")))
    }

    /// Inverse pass with `log|det ∂F⁻¹/∂y|` per row; analytic layers only.
    pub fn inverse_log_det(&self, g: &mut Tape, t: Var, y: Var) -> Result<(Var, Var)> {
        let mut x = y;
        let mut total: Option<Var> = None;
        for l in self.layers.iter().rev() {
            let (next, ld) = match l {
                FlowLayer::Coupling(c) => c.inverse_log_det(g, t, x),
                FlowLayer::Linear(lin) => {
                    let ld = lin.log_det(g, t);
                    (lin.inverse(g, t, x), g.neg(ld))
                }
                _ => return Err(Error::Invalid("log-determinant needs coupling or linear layers".into())),
            };
            x = next;
            total = Some(match total {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        Ok((x, total.expect("non-empty stack")))
    }

    fn check_batch(&self, times: &[f64], x: &Tensor) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::shape(
                "flow_forward",
                format!("state width {} but the flow has dimension {}", x.cols(), self.dim),
            ));
        }
        if times.len() != x.rows() {
            return Err(Error::shape(
                "flow_forward",
                format!("{} times for {} states", times.len(), x.rows()),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("flow time"));
        }
        Ok(())
    }

    /// `F(t_i, x_i)` for every row, without recording gradients.
    pub fn eval(&self, ps: &ParamSet, times: &[f64], x: &Tensor) -> Result<Tensor> {
        self.check_batch(times, x)?;
        let mut g = Tape::no_grad(ps);
        let t = g.constant(Tensor::column(times));
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, t, xv);
        Ok(g.value(y).clone())
    }

    /// `F⁻¹(t_i, y_i)` for every row.
    pub fn eval_inverse(&self, ps: &ParamSet, times: &[f64], y: &Tensor, cfg: InverseConfig) -> Result<Tensor> {
        self.check_batch(times, y)?;
        let mut g = Tape::no_grad(ps);
        let t = g.constant(Tensor::column(times));
        let yv = g.constant(y.clone());
        let x = self.inverse(&mut g, t, yv, cfg)?;
        Ok(g.value(x).clone())
    }

    /// Solution through `(t0, x0)` evaluated at each target time.
    ///
    /// The initial value at time zero is recovered once by inversion and then
    /// pushed forward to every target.
    pub fn solve_ivp(
        &self,
        ps: &ParamSet,
        t0: f64,
        x0: &[f64],
        targets: &[f64],
        cfg: InverseConfig,
    ) -> Result<Vec<Vec<f64>>> {
        let x0 = Tensor::row(x0);
        let base = if t0 == 0.0 {
            x0
        } else {
            self.eval_inverse(ps, &[t0], &x0, cfg)?
        };
        let rows: Vec<Vec<f64>> = vec![base.data().to_vec(); targets.len()];
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Tensor::from_rows(&rows)?;
        let out = self.eval(ps, targets, &batch)?;
        Ok((0..out.rows()).map(|i| out.row_slice(i).to_vec()).collect())
    }

    /// Semigroup violation `mean_i ‖F(t_i, x_i) − F(t_i⁽²⁾, F(t_i⁽¹⁾, x_i))‖²`
    /// for a uniformly random split `t_i = t_i⁽¹⁾ + t_i⁽²⁾`.
    pub fn autonomous_penalty<R: Rng>(&self, g: &mut Tape, times: &[f64], x: Var, rng: &mut R) -> Var {
        let (first, second) = split_times(times, rng);
        let t = g.constant(Tensor::column(times));
        let t1 = g.constant(Tensor::column(&first));
        let t2 = g.constant(Tensor::column(&second));
        let direct = self.forward(g, t, x);
        let mid = self.forward(g, t1, x);
        let composed = self.forward(g, t2, mid);
        let diff = g.sub(direct, composed);
        let sq = g.square(diff);
        let per_row = g.row_sums(sq);
        g.mean(per_row)
    }
}

/// Splits each `t` into `(s, t − s)` with `s ~ U(0, t)`.
pub fn split_times<R: Rng>(times: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let first: Vec<f64> = times.iter().map(|&t| t * unit.sample(rng)).collect();
    let second = times.iter().zip(&first).map(|(t, s)| t - s).collect();
    (first, second)
}

#[cfg(test)]
mod tests;
