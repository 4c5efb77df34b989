//! Time embeddings φ(t) that vanish at `t = 0`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Which embedding family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// φ(t) = α t
    Linear,
    /// φ(t) = tanh(α t)
    TanhLinear,
    /// φ(t)ᵢ = Σₖ αᵢₖ sin(βᵢₖ t), optionally squashed by tanh.
    Fourier { features: usize, bounded: bool },
}

impl EmbeddingKind {
    pub fn is_bounded(self) -> bool {
        match self {
            EmbeddingKind::Linear => false,
            EmbeddingKind::TanhLinear => true,
            EmbeddingKind::Fourier { bounded, .. } => bounded,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub kind: EmbeddingKind,
    pub dim: usize,
    /// Linear/tanh: `d × 1` slopes. Fourier: `1 × d·K` amplitudes.
    pub alpha: ParamId,
    /// Fourier frequencies, `d·K × 1`.
    pub beta: Option<ParamId>,
    /// Forces φ(t) ≥ 0 for t ≥ 0: slopes pass through softplus and the
    /// bounded Fourier sum is squared before the tanh.
    pub nonnegative: bool,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        kind: EmbeddingKind,
        dim: usize,
        nonnegative: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("time embedding needs a positive dimension".into()));
        }
        if nonnegative && kind == EmbeddingKind::Linear {
            return Err(Error::Invalid("a linear embedding cannot be bounded".into()));
        }
        let unit = Uniform::new(-1.0, 1.0).expect("valid range");
        let (alpha, beta) = match kind {
            EmbeddingKind::Linear | EmbeddingKind::TanhLinear => {
                let a: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
                (ps.add(format!("{name}.alpha"), Tensor::raw(dim, 1, a)), None)
            }
            EmbeddingKind::Fourier { features, .. } => {
                if features == 0 {
                    return Err(Error::Invalid("fourier embedding needs at least one feature".into()));
                }
                let n = dim * features;
                let a: Vec<f64> = (0..n).map(|_| unit.sample(rng) / features as f64).collect();
                let freq = Uniform::new(0.2, 3.0).expect("valid range");
                let b: Vec<f64> = (0..n).map(|_| freq.sample(rng)).collect();
                (
                    ps.add(format!("{name}.alpha"), Tensor::raw(1, n, a)),
                    Some(ps.add(format!("{name}.beta"), Tensor::raw(n, 1, b))),
                )
            }
        };
        Ok(Self {
            kind,
            dim,
            alpha,
            beta,
            nonnegative,
        })
    }

    /// `t` is `n × 1`; returns `n × dim`.
    pub fn forward(&self, g: &mut Tape, t: Var) -> Var {
        match self.kind {
            EmbeddingKind::Linear => {
                let a = g.param(self.alpha);
                g.linear(t, a)
            }
            EmbeddingKind::TanhLinear => {
                let mut a = g.param(self.alpha);
                if self.nonnegative {
                    a = g.softplus(a);
                }
                let at = g.linear(t, a);
                g.tanh(at)
            }
            EmbeddingKind::Fourier { features, bounded } => {
                let a = g.param(self.alpha);
                let b = g.param(self.beta.expect("fourier frequencies"));
                let bt = g.linear(t, b);
                let s = g.sin(bt);
                let weighted = g.mul_row(s, a);
                let group = g.constant(group_sum_matrix(self.dim, features));
                let mut out = g.linear(weighted, group);
                if bounded {
                    if self.nonnegative {
                        out = g.square(out);
                    }
                    out = g.tanh(out);
                }
                out
            }
        }
    }

    /// φ(t) for a single time.
    pub fn eval(&self, ps: &ParamSet, t: f64) -> Vec<f64> {
        let mut g = Tape::no_grad(ps);
        let tv = g.constant(Tensor::scalar(t));
        let out = self.forward(&mut g, tv);
        g.value(out).data().to_vec()
    }
}

/// `d × d·K` matrix summing consecutive blocks of `K` columns.
fn group_sum_matrix(dim: usize, features: usize) -> Tensor {
    let mut m = Tensor::zeros(dim, dim * features);
    for i in 0..dim {
        for k in 0..features {
            m.set(i, i * features + k, 1.0);
        }
    }
    m
}
