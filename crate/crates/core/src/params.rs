//! Parameter storage shared by every model in the crate.
//!
//! Layers hold [`ParamId`]s; the values live in a single [`ParamSet`] so the
//! optimizer, the tape and the serializer all see one flat list.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (power-iteration vectors) are stored but never optimized.
    pub trainable: bool,
}

/// Ties a weight matrix to its persisted power-iteration vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralLink {
    pub weight: ParamId,
    pub u: ParamId,
    pub v: ParamId,
    pub coeff: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    spectral: Vec<SpectralLink>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn spectral_links(&self) -> &[SpectralLink] {
        &self.spectral
    }

    pub fn spectral_link(&self, weight: ParamId) -> Option<&SpectralLink> {
        self.spectral.iter().find(|l| l.weight == weight)
    }

    /// Attaches a spectral-norm bound to `weight` and runs `iters` power
    /// iterations from a random start.
    pub fn register_spectral<R: Rng>(
        &mut self,
        weight: ParamId,
        coeff: f64,
        iters: usize,
        rng: &mut R,
    ) -> Result<()> {
        if !(coeff > 0.0 && coeff < 1.0) {
            return Err(Error::Invalid(format!("spectral coefficient {coeff} not in (0,1)")));
        }
        let (out, inp) = {
            let w = self.get(weight);
            (w.rows(), w.cols())
        };
        let name = self.entries[weight.0].name.clone();
        let u = unit_random(out, rng);
        let v = unit_random(inp, rng);
        let u = self.add_buffer(format!("{name}.sn_u"), u);
        let v = self.add_buffer(format!("{name}.sn_v"), v);
        self.spectral.push(SpectralLink {
            weight,
            u,
            v,
            coeff,
        });
        self.power_iterate_link(self.spectral.len() - 1, iters);
        Ok(())
    }

    /// Advances every persisted power iteration by `iters` steps.
    pub fn power_iterate(&mut self, iters: usize) {
        for i in 0..self.spectral.len() {
            self.power_iterate_link(i, iters);
        }
    }

    fn power_iterate_link(&mut self, link: usize, iters: usize) {
        let SpectralLink { weight, u, v, .. } = self.spectral[link].clone();
        let mut state = PowerIteration {
            u: self.get(u).data().to_vec(),
            v: self.get(v).data().to_vec(),
        };
        state.run(self.get(weight), iters);
        self.get_mut(u).data_mut().copy_from_slice(&state.u);
        self.get_mut(v).data_mut().copy_from_slice(&state.v);
    }

    /// The weight actually used in forward passes: rescaled by `coeff/σ̂`
    /// when the power-iteration estimate σ̂ exceeds the bound.
    pub fn effective_weight(&self, weight: ParamId) -> Tensor {
        let w = self.get(weight);
        match self.spectral_link(weight) {
            None => w.clone(),
            Some(link) => {
                let sigma = bilinear(self.get(link.u).data(), w, self.get(link.v).data());
                w.scale(spectral_factor(sigma, link.coeff))
            }
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Invalid(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// `min(1, coeff/σ)`; a zero estimate leaves the weight unchanged.
pub(crate) fn spectral_factor(sigma: f64, coeff: f64) -> f64 {
    if sigma > coeff {
        coeff / sigma
    } else {
        1.0
    }
}

/// `uᵀ W v` for `W` of shape `len(u) × len(v)`.
pub(crate) fn bilinear(u: &[f64], w: &Tensor, v: &[f64]) -> f64 {
    (0..w.rows())
        .map(|i| u[i] * w.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn unit_random<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    Tensor::raw(1, n, v)
}

/// Power iteration for the largest singular value with persistent vectors.
#[derive(Clone, Debug)]
pub struct PowerIteration {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PowerIteration {
    pub fn new(rows: usize, cols: usize) -> Self {
        // Deterministic, non-degenerate start.
        let start = |n: usize| {
            let v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        Self {
            u: start(rows),
            v: start(cols),
        }
    }

    /// Runs `iters` rounds and returns σ̂ = uᵀWv.
    pub fn run(&mut self, w: &Tensor, iters: usize) -> f64 {
        let (r, c) = (w.rows(), w.cols());
        for _ in 0..iters {
            let mut v = vec![0.0; c];
            for i in 0..r {
                let ui = self.u[i];
                for (vj, wij) in v.iter_mut().zip(w.row_slice(i)) {
                    *vj += wij * ui;
                }
            }
            if !normalize(&mut v) {
                return 0.0;
            }
            self.v = v;
            let mut u: Vec<f64> = (0..r)
                .map(|i| w.row_slice(i).iter().zip(&self.v).map(|(a, b)| a * b).sum())
                .collect();
            if !normalize(&mut u) {
                return 0.0;
            }
            self.u = u;
        }
        bilinear(&self.u, w, &self.v)
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Rescales `w` so its largest singular value does not exceed `coeff`.
///
/// The estimate comes from `iters` rounds of power iteration continuing from
/// `state`, so repeated calls refine the same vectors. A zero matrix is
/// returned unchanged.
pub fn spectral_normalize(
    w: &Tensor,
    coeff: f64,
    iters: usize,
    state: &mut PowerIteration,
) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::Invalid("spectral_normalize needs at least one iteration".into()));
    }
    if !(coeff > 0.0 && coeff < 1.0) {
        return Err(Error::Invalid(format!("spectral coefficient {coeff} not in (0,1)")));
    }
    if state.u.len() != w.rows() || state.v.len() != w.cols() {
        return Err(Error::shape("spectral_normalize", "power-iteration vectors do not match weight"));
    }
    let sigma = state.run(w, iters);
    Ok(w.scale(spectral_factor(sigma, coeff)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_examples() {
        let w = Tensor::diag(&[2.0, 0.5]);
        let mut st = PowerIteration::new(2, 2);
        let out = spectral_normalize(&w, 0.9, 20, &mut st).unwrap();
        assert!((out.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((out.get(1, 1) - 0.225).abs() < 1e-9);

        let w = Tensor::diag(&[0.5, 0.1]);
        let mut st = PowerIteration::new(2, 2);
        assert_eq!(spectral_normalize(&w, 0.9, 20, &mut st).unwrap(), w);

        let z = Tensor::zeros(3, 2);
        let mut st = PowerIteration::new(3, 2);
        assert_eq!(spectral_normalize(&z, 0.9, 5, &mut st).unwrap(), z);
    }

    #[test]
    fn rejects_bad_arguments() {
        let w = Tensor::diag(&[1.0, 1.0]);
        let mut st = PowerIteration::new(2, 2);
        assert!(spectral_normalize(&w, 0.9, 0, &mut st).is_err());
        assert!(spectral_normalize(&w, 1.5, 3, &mut st).is_err());
        let mut wrong = PowerIteration::new(3, 2);
        assert!(spectral_normalize(&w, 0.9, 3, &mut wrong).is_err());
    }

    #[test]
    fn registered_weight_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::from_rows(&[vec![3.0, 1.0], vec![0.0, 2.0]]).unwrap());
        ps.register_spectral(w, 0.9, 20, &mut rng).unwrap();
        let eff = ps.effective_weight(w);
        let mut exact = PowerIteration::new(2, 2);
        let sigma = exact.run(&eff, 1000);
        assert!(sigma <= 0.9 + 1e-4, "sigma {sigma}");
        assert_eq!(ps.len(), 3);
        assert_eq!(ps.num_trainable(), 4);
    }
}
