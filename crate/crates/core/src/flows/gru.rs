//! Continuous-time GRU flow.
//!
//! `F(t, h) = h + φ(t) ⊙ z(t, h) ⊙ (c(t, h) − h)` with
//! `z = α σ(f_z(h, t))`, `r = β σ(f_r(h, t))`, `c = tanh(f_c(r ⊙ h, t))`.
//! With contractive `f_·`, `α = 2/5`, `β = 4/5` and `φ(t) ∈ [0, 1)` the
//! residual is a contraction on `(−1, 1)^d`, so `F(t, ·)` is invertible there.
//!
//! Writing the gate as `1 − z̃` with `z̃ = 1 − z` recovers the form where the
//! state update is scaled by `(1 − z̃)`; both describe the same map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{EmbeddingKind, TimeEmbedding};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::params::ParamSet;

/// Update-gate scale.
pub const ALPHA: f64 = 2.0 / 5.0;
/// Reset-gate scale.
pub const BETA: f64 = 4.0 / 5.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruFlow {
    pub dim: usize,
    pub f_z: Mlp,
    pub f_r: Mlp,
    pub f_c: Mlp,
    pub phi: TimeEmbedding,
}

/// Intermediate quantities of one evaluation, exposed for tests.
pub struct GruGates {
    pub z: Var,
    pub r: Var,
    pub c: Var,
    pub phi: Var,
}

impl GruFlow {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: &[usize],
        embedding: EmbeddingKind,
        spectral_coeff: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !embedding.is_bounded() {
            return Err(Error::Invalid(
                "gru flow needs a bounded time embedding (tanh or bounded fourier)".into(),
            ));
        }
        let mut net = |part: &str, rng: &mut R| {
            let spec = MlpSpec::new(dim + 1, hidden.to_vec(), dim)
                .activation(Activation::Tanh)
                .spectral(spectral_coeff);
            Mlp::new(ps, &format!("{name}.{part}"), spec, rng)
        };
        let f_z = net("f_z", rng)?;
        let f_r = net("f_r", rng)?;
        let f_c = net("f_c", rng)?;
        let phi = TimeEmbedding::new(ps, &format!("{name}.phi"), embedding, dim, true, rng)?;
        Ok(Self {
            dim,
            f_z,
            f_r,
            f_c,
            phi,
        })
    }

    pub fn gates(&self, g: &mut Tape, t: Var, h: Var) -> GruGates {
        let inp = g.hcat(&[h, t]);
        let z = self.f_z.forward(g, inp);
        let z = g.sigmoid(z);
        let z = g.scale(z, ALPHA);
        let r = self.f_r.forward(g, inp);
        let r = g.sigmoid(r);
        let r = g.scale(r, BETA);
        let rh = g.mul(r, h);
        let c_in = g.hcat(&[rh, t]);
        let c = self.f_c.forward(g, c_in);
        let c = g.tanh(c);
        let phi = self.phi.forward(g, t);
        GruGates { z, r, c, phi }
    }

    /// `φ(t) ⊙ z ⊙ (c − h)`.
    pub fn residual(&self, g: &mut Tape, t: Var, h: Var) -> Var {
        let GruGates { z, c, phi, .. } = self.gates(g, t, h);
        let diff = g.sub(c, h);
        let gated = g.mul(z, diff);
        g.mul(phi, gated)
    }

    pub fn forward(&self, g: &mut Tape, t: Var, h: Var) -> Var {
        let r = self.residual(g, t, h);
        g.add(h, r)
    }
}
