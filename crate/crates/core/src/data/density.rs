//! Two-dimensional density data: a tight Gaussian at the origin plus a noisy
//! unit circle, mixed 50/50.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityDataset2D {
    /// `n × 2`.
    pub samples: Tensor,
    /// Mixture component per sample: 0 for the Gaussian, 1 for the circle.
    pub component: Vec<u8>,
    pub gaussian_std: f64,
    pub circle_radius: f64,
    pub circle_noise: f64,
    /// Probability of the Gaussian component.
    pub weight: f64,
}

impl DensityDataset2D {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mixture weights `[gaussian, circle]`.
    pub fn weights(&self) -> [f64; 2] {
        [self.weight, 1.0 - self.weight]
    }

    pub fn rows(&self, idx: std::ops::Range<usize>) -> Tensor {
        let r: Vec<usize> = idx.collect();
        self.samples.select_rows(&r)
    }
}

pub fn gen_density2d(n: usize, seed: u64) -> Result<DensityDataset2D> {
    if n == 0 {
        return Err(Error::config("dataset.n", "need at least one sample"));
    }
    let (gaussian_std, circle_radius, circle_noise) = (0.05, 1.0, 0.01);
    let mut rng = rng_for(seed, 0);
    let g = Normal::new(0.0, gaussian_std).expect("valid std");
    let radial = Normal::new(circle_radius, circle_noise).expect("valid std");
    let mut samples = Vec::with_capacity(2 * n);
    let mut component = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.random::<f64>() < 0.5 {
            samples.push(g.sample(&mut rng));
            samples.push(g.sample(&mut rng));
            component.push(0);
        } else {
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let r = radial.sample(&mut rng);
            samples.push(r * theta.cos());
            samples.push(r * theta.sin());
            component.push(1);
        }
    }
    Ok(DensityDataset2D {
        samples: Tensor::raw(n, 2, samples),
        component,
        gaussian_std,
        circle_radius,
        circle_noise,
        weight: 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shape() {
        let ds = gen_density2d(4000, 1).unwrap();
        assert_eq!(ds.weights().iter().sum::<f64>(), 1.0);
        let circle = ds.component.iter().filter(|&&c| c == 1).count() as f64 / 4000.0;
        assert!((circle - 0.5).abs() < 0.03);
        for i in 0..ds.len() {
            let r = ds.samples.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if ds.component[i] == 1 {
                assert!((r - 1.0).abs() < 0.05, "radius {r}");
            } else {
                assert!(r < 0.5);
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_density2d(100, 5).unwrap(), gen_density2d(100, 5).unwrap());
        assert_ne!(gen_density2d(100, 5).unwrap().samples, gen_density2d(100, 6).unwrap().samples);
        assert!(gen_density2d(0, 0).is_err());
    }
}
