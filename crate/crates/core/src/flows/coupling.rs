//! Affine coupling flow.
//!
//! Coordinates in `B` are copied; those in `A` become
//! `x_A ⊙ exp(u(t, x_B) ⊙ φ_u(t)) + v(t, x_B) ⊙ φ_v(t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{EmbeddingKind, TimeEmbedding};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingFlow {
    pub dim: usize,
    /// Transformed coordinates.
    pub a: Vec<usize>,
    /// Conditioning coordinates; empty only when `dim == 1`.
    pub b: Vec<usize>,
    pub u: Mlp,
    pub v: Mlp,
    pub phi_u: TimeEmbedding,
    pub phi_v: TimeEmbedding,
}

/// Pieces of one forward evaluation.
struct Parts {
    xa: Var,
    xb: Var,
    /// `u ⊙ φ_u`, the log-scale per transformed coordinate.
    log_scale: Var,
    /// `v ⊙ φ_v`.
    shift: Var,
}

impl CouplingFlow {
    /// Even or odd coordinates are transformed depending on `parity`.
    pub fn alternating(dim: usize, parity: usize) -> (Vec<usize>, Vec<usize>) {
        if dim == 1 {
            return (vec![0], Vec::new());
        }
        (0..dim).partition(|i| i % 2 == parity % 2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        a: Vec<usize>,
        hidden: &[usize],
        activation: Activation,
        embedding: EmbeddingKind,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in &a {
            if i >= dim || seen[i] {
                return Err(Error::Invalid(format!("coupling partition {a:?} is not a subset of 0..{dim}")));
            }
            seen[i] = true;
        }
        let b: Vec<usize> = (0..dim).filter(|i| !seen[*i]).collect();
        if a.is_empty() || (b.is_empty() && dim > 1) {
            return Err(Error::Invalid(format!(
                "coupling partition needs non-empty A and B, got A={a:?} B={b:?}"
            )));
        }
        let spec = MlpSpec::new(b.len() + 1, hidden.to_vec(), a.len()).activation(activation);
        let u = Mlp::new(ps, &format!("{name}.u"), spec.clone(), rng)?;
        let v = Mlp::new(ps, &format!("{name}.v"), spec, rng)?;
        if zero_init {
            for net in [&u, &v] {
                let last = net.layers.last().expect("at least one layer");
                let w = ps.get_mut(last.weight);
                *w = Tensor::zeros(w.rows(), w.cols());
                let bias = ps.get_mut(last.bias);
                *bias = Tensor::zeros(bias.rows(), bias.cols());
            }
        }
        let phi_u = TimeEmbedding::new(ps, &format!("{name}.phi_u"), embedding, a.len(), false, rng)?;
        let phi_v = TimeEmbedding::new(ps, &format!("{name}.phi_v"), embedding, a.len(), false, rng)?;
        Ok(Self {
            dim,
            a,
            b,
            u,
            v,
            phi_u,
            phi_v,
        })
    }

    fn parts(&self, g: &mut Tape, t: Var, x: Var) -> Parts {
        let xa = g.select_cols(x, &self.a);
        let (inp, xb) = if self.b.is_empty() {
            (t, t)
        } else {
            let xb = g.select_cols(x, &self.b);
            (g.hcat(&[xb, t]), xb)
        };
        let u = self.u.forward(g, inp);
        let pu = self.phi_u.forward(g, t);
        let log_scale = g.mul(u, pu);
        let v = self.v.forward(g, inp);
        let pv = self.phi_v.forward(g, t);
        let shift = g.mul(v, pv);
        Parts {
            xa,
            xb,
            log_scale,
            shift,
        }
    }

    /// Reassembles `[new_a | x_b]` into the original coordinate order.
    fn merge(&self, g: &mut Tape, new_a: Var, xb: Var) -> Var {
        if self.b.is_empty() {
            return new_a;
        }
        let joined = g.hcat(&[new_a, xb]);
        let mut perm = vec![0; self.dim];
        for (pos, &i) in self.a.iter().chain(&self.b).enumerate() {
            perm[i] = pos;
        }
        g.select_cols(joined, &perm)
    }

    /// Returns `(F(t, x), log|det ∂F/∂x|)` with the log-determinant `n × 1`.
    pub fn forward_log_det(&self, g: &mut Tape, t: Var, x: Var) -> (Var, Var) {
        let Parts {
            xa,
            xb,
            log_scale,
            shift,
        } = self.parts(g, t, x);
        let scale = g.exp(log_scale);
        let ya = g.mul(xa, scale);
        let ya = g.add(ya, shift);
        let y = self.merge(g, ya, xb);
        let ld = g.row_sums(log_scale);
        (y, ld)
    }

    pub fn forward(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        self.forward_log_det(g, t, x).0
    }

    /// Returns `(F⁻¹(t, y), log|det ∂F⁻¹/∂y|)`.
    pub fn inverse_log_det(&self, g: &mut Tape, t: Var, y: Var) -> (Var, Var) {
        // x_B = y_B, so the conditioner sees the same input in both directions.
        let Parts {
            xa: ya,
            xb,
            log_scale,
            shift,
        } = self.parts(g, t, y);
        let centered = g.sub(ya, shift);
        let neg = g.neg(log_scale);
        let inv_scale = g.exp(neg);
        let xa = g.mul(centered, inv_scale);
        let x = self.merge(g, xa, xb);
        let ld = g.row_sums(neg);
        (x, ld)
    }

    pub fn inverse(&self, g: &mut Tape, t: Var, y: Var) -> Var {
        self.inverse_log_det(g, t, y).0
    }
}
