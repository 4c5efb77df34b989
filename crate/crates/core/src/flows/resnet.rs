//! Residual flow `F(t, x) = x + φ(t) ⊙ g(t, x)` with a contractive `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{EmbeddingKind, TimeEmbedding};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::params::ParamSet;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResNetFlow {
    pub dim: usize,
    pub net: Mlp,
    pub phi: TimeEmbedding,
}

impl ResNetFlow {
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
                "resnet flow needs a bounded time embedding (tanh or bounded fourier)".into(),
            ));
        }
        let spec = MlpSpec::new(dim + 1, hidden.to_vec(), dim)
            .activation(Activation::Tanh)
            .spectral(spectral_coeff);
        let net = Mlp::new(ps, &format!("{name}.g"), spec, rng)?;
        let phi = TimeEmbedding::new(ps, &format!("{name}.phi"), embedding, dim, false, rng)?;
        Ok(Self { dim, net, phi })
    }

    /// `φ(t) ⊙ g(t, x)`, the part that must be contractive in `x`.
    pub fn residual(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        let inp = g.hcat(&[x, t]);
        let out = self.net.forward(g, inp);
        let p = self.phi.forward(g, t);
        g.mul(p, out)
    }

    pub fn forward(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        let r = self.residual(g, t, x);
        g.add(x, r)
    }
}
