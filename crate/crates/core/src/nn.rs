//! Dense layers, MLPs and the discrete GRU cell.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Elu => g.elu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Upper bound on the activation's Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }
}

/// Affine map `x Wᵀ + b` with `W` stored out × in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(±1/√in) initialization, the usual default for dense layers.
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| dist.sample(rng)).collect();
        let weight = ps.add(format!("{name}.weight"), Tensor::raw(out_dim, in_dim, w));
        let bias = ps.add(format!("{name}.bias"), Tensor::raw(1, out_dim, b));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Tape, x: Var) -> Var {
        let w = g.weight(self.weight);
        let b = g.param(self.bias);
        let y = g.linear(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    pub final_activation: Activation,
    /// Spectral bound applied to every linear layer.
    pub spectral_coeff: Option<f64>,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            activation: Activation::Tanh,
            final_activation: Activation::Identity,
            spectral_coeff: None,
        }
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn final_activation(mut self, a: Activation) -> Self {
        self.final_activation = a;
        self
    }

    pub fn spectral(mut self, coeff: f64) -> Self {
        self.spectral_coeff = Some(coeff);
        self
    }
}

/// Power iterations run when a spectral-normalized layer is built.
pub const SPECTRAL_INIT_ITERS: usize = 20;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Invalid(format!("mlp `{name}` has a zero-width layer")));
        }
        if spec.spectral_coeff.is_some()
            && (spec.activation == Activation::Elu || spec.final_activation == Activation::Elu)
        {
            return Err(Error::Invalid(format!(
                "mlp `{name}`: ELU is not allowed inside a contractive network"
            )));
        }
        let mut dims = vec![spec.in_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let layer = Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng);
            if let Some(c) = spec.spectral_coeff {
                ps.register_spectral(layer.weight, c, SPECTRAL_INIT_ITERS, rng)?;
            }
            layers.push(layer);
        }
        Ok(Self { spec, layers })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// Records the forward pass; `x` must be `n × in_dim`.
    pub fn forward(&self, g: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            let act = if i == last {
                self.spec.final_activation
            } else {
                self.spec.activation
            };
            h = act.apply(g, h);
        }
        h
    }

    /// Shape-checked batch evaluation outside of training.
    pub fn eval(&self, ps: &ParamSet, inputs: &Tensor) -> Result<Tensor> {
        if inputs.cols() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {} but the network expects {}", inputs.cols(), self.in_dim()),
            ));
        }
        let mut g = Tape::no_grad(ps);
        let x = g.constant(inputs.clone());
        let y = self.forward(&mut g, x);
        Ok(g.value(y).clone())
    }

    /// Forward-mode derivative of the output along a fixed input direction.
    ///
    /// `dir` is `n × in_dim` (zero in directions that are held fixed).
    /// Returns `(output, ∂output/∂input · dir)`, both recorded on the tape so
    /// they can be differentiated with respect to parameters. Only tanh,
    /// sigmoid and identity activations are supported.
    pub fn forward_with_tangent(&self, g: &mut Tape, x: Var, dir: Var) -> (Var, Var) {
        let mut h = x;
        let mut dh = dir;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.weight(layer.weight);
            let b = g.param(layer.bias);
            let pre = g.linear(h, w);
            let pre = g.add_row(pre, b);
            let dpre = g.linear(dh, w);
            let act = if i == last {
                self.spec.final_activation
            } else {
                self.spec.activation
            };
            match act {
                Activation::Identity => {
                    h = pre;
                    dh = dpre;
                }
                Activation::Tanh => {
                    h = g.tanh(pre);
                    // tanh' = 1 − y²
                    let y2 = g.square(h);
                    let neg = g.neg(y2);
                    let d = g.add_scalar(neg, 1.0);
                    dh = g.mul(dpre, d);
                }
                Activation::Sigmoid => {
                    h = g.sigmoid(pre);
                    let y2 = g.square(h);
                    let d = g.sub(h, y2);
                    dh = g.mul(dpre, d);
                }
                Activation::Elu => {
                    h = g.elu(pre);
                    let mask = g.value(pre).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let mask = g.constant(mask);
                    let inv = g.value(pre).map(|v| if v > 0.0 { 0.0 } else { 1.0 });
                    let inv = g.constant(inv);
                    // d = mask + (1−mask)·exp(pre) = mask + inv ⊙ (h + 1)
                    let h1 = g.add_scalar(h, 1.0);
                    let neg_part = g.mul(inv, h1);
                    let d = g.add(mask, neg_part);
                    dh = g.mul(dpre, d);
                }
            }
        }
        (h, dh)
    }
}

/// Standard GRU cell, `h' = z ⊙ h + (1 − z) ⊙ c`, used for discrete updates
/// at observed events.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub z_x: Linear,
    pub z_h: Linear,
    pub r_x: Linear,
    pub r_h: Linear,
    pub c_x: Linear,
    pub c_h: Linear,
}

impl GruCell {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut lin = |part: &str, i: usize| Linear::new(ps, &format!("{name}.{part}"), i, hidden_dim, rng);
        Self {
            input_dim,
            hidden_dim,
            z_x: lin("z_x", input_dim),
            z_h: lin("z_h", hidden_dim),
            r_x: lin("r_x", input_dim),
            r_h: lin("r_h", hidden_dim),
            c_x: lin("c_x", input_dim),
            c_h: lin("c_h", hidden_dim),
        }
    }

    pub fn forward(&self, g: &mut Tape, h: Var, x: Var) -> Var {
        let zx = self.z_x.forward(g, x);
        let zh = self.z_h.forward(g, h);
        let z = g.add(zx, zh);
        let z = g.sigmoid(z);
        let rx = self.r_x.forward(g, x);
        let rh = self.r_h.forward(g, h);
        let r = g.add(rx, rh);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let cx = self.c_x.forward(g, x);
        let ch = self.c_h.forward(g, rh);
        let c = g.add(cx, ch);
        let c = g.tanh(c);
        // h' = c + z ⊙ (h − c)
        let diff = g.sub(h, c);
        let gated = g.mul(z, diff);
        g.add(c, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = Mlp::new(&mut ps, "n", MlpSpec::new(3, vec![4], 2), &mut rng).unwrap();
        for id in ps.trainable_ids() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let y = net.eval(&ps, &Tensor::full(5, 3, 0.7)).unwrap();
        assert_eq!(y, Tensor::zeros(5, 2));
    }

    #[test]
    fn identity_weight_tanh_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = Mlp::new(
            &mut ps,
            "n",
            MlpSpec::new(2, vec![], 2).final_activation(Activation::Tanh),
            &mut rng,
        )
        .unwrap();
        *ps.get_mut(net.layers[0].weight) = Tensor::identity(2);
        *ps.get_mut(net.layers[0].bias) = Tensor::zeros(1, 2);
        assert_eq!(net.eval(&ps, &Tensor::zeros(1, 2)).unwrap(), Tensor::zeros(1, 2));
    }

    #[test]
    fn matches_independent_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let spec = MlpSpec::new(3, vec![5, 4], 2)
            .activation(Activation::Elu)
            .final_activation(Activation::Sigmoid);
        let net = Mlp::new(&mut ps, "n", spec, &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]]).unwrap();
        let y = net.eval(&ps, &x).unwrap();
        for r in 0..2 {
            let mut h: Vec<f64> = x.row_slice(r).to_vec();
            for (i, layer) in net.layers.iter().enumerate() {
                let w = ps.get(layer.weight);
                let b = ps.get(layer.bias);
                let act = if i == net.layers.len() - 1 {
                    Activation::Sigmoid
                } else {
                    Activation::Elu
                };
                h = (0..layer.out_dim)
                    .map(|o| {
                        let s: f64 = (0..layer.in_dim).map(|k| w.get(o, k) * h[k]).sum();
                        act.eval(s + b.get(0, o))
                    })
                    .collect();
            }
            for (c, v) in h.iter().enumerate() {
                assert!((y.get(r, c) - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = Mlp::new(&mut ps, "n", MlpSpec::new(3, vec![4], 2), &mut rng).unwrap();
        assert!(matches!(net.eval(&ps, &Tensor::zeros(1, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn elu_rejected_in_contractive_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let spec = MlpSpec::new(2, vec![4], 2).activation(Activation::Elu).spectral(0.9);
        assert!(Mlp::new(&mut ps, "n", spec, &mut rng).is_err());
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Elu] {
            let net = Mlp::new(
                &mut ps,
                "t",
                MlpSpec::new(3, vec![6], 3).activation(act),
                &mut rng,
            )
            .unwrap();
            let x0 = Tensor::from_rows(&[vec![0.2, -0.7, 1.1]]).unwrap();
            let dir = Tensor::row(&[0.0, 1.0, 0.0]);
            let mut g = Tape::no_grad(&ps);
            let x = g.constant(x0.clone());
            let d = g.constant(dir.clone());
            let (_, dy) = net.forward_with_tangent(&mut g, x, d);
            let h = 1e-6;
            let mut xp = x0.clone();
            xp.data_mut()[1] += h;
            let mut xm = x0.clone();
            xm.data_mut()[1] -= h;
            let fd = net.eval(&ps, &xp).unwrap().sub(&net.eval(&ps, &xm).unwrap()).scale(0.5 / h);
            assert!(fd.sub(g.value(dy)).max_abs() < 1e-8);
        }
    }
}
