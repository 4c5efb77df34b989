//! Adam with decoupled weight decay, plus a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates and step counter for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of `params` in place.
    ///
    /// Weight decay is decoupled: `lr · wd · p` is subtracted alongside the
    /// bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if !(self.config.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.config.lr)));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam_step", "parameter list changed between steps"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *pk -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pk);
            }
        }
        Ok(())
    }

    /// Updates every trainable entry of `ps`; missing gradients count as zero.
    pub fn step_params(&mut self, ps: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        let ids = ps.trainable_ids();
        let zeros: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                let p = ps.get(id);
                Tensor::zeros(p.rows(), p.cols())
            })
            .collect();
        let grad_refs: Vec<&Tensor> = ids
            .iter()
            .zip(&zeros)
            .map(|(id, z)| grads.get(id.0).and_then(Option::as_ref).unwrap_or(z))
            .collect();
        let mut params: Vec<&mut Tensor> = ps
            .entries_mut()
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.value)
            .collect();
        self.step(&mut params, &grad_refs)
    }
}

/// Multiplies the learning rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if self.every == 0 {
            return base;
        }
        base * self.factor.powi((epoch / self.every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64, cfg: AdamConfig) -> f64 {
        let mut p = Tensor::scalar(w);
        let gt = Tensor::scalar(g);
        let mut st = AdamState::new(cfg);
        st.step(&mut [&mut p], &[&gt]).unwrap();
        assert_eq!(st.t, 1);
        p.data()[0]
    }

    #[test]
    fn first_step_examples() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        assert!((single(0.0, 1.0, cfg) + 0.1).abs() < 1e-7);
        assert_eq!(single(0.7, 0.0, cfg), 0.7);
        let wd = AdamConfig {
            weight_decay: 1e-4,
            ..cfg
        };
        assert!((single(1.0, 0.0, wd) - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(1, 2);
        let g = Tensor::zeros(2, 1);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
        assert!(st.step(&mut [&mut p], &[]).is_err());
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = Tensor::row(&[0.3, -0.2, 1.5]);
            let mut st = AdamState::new(AdamConfig::default());
            let mut out = Vec::new();
            for k in 0..50 {
                let g = p.map(|x| (x * (k as f64 + 1.0)).sin());
                st.step(&mut [&mut p], &[&g]).unwrap();
                out.extend(p.data().iter().map(|x| x.to_bits()));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay {
            every: 20,
            factor: 0.5,
        };
        assert_eq!(s.lr_at(1e-3, 0), 1e-3);
        assert_eq!(s.lr_at(1e-3, 19), 1e-3);
        assert_eq!(s.lr_at(1e-3, 40), 2.5e-4);
    }
}
