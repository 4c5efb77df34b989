//! Synthetic temporal point processes and their exact likelihoods.

use rand::Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Error, Result};

/// Generating process. Hawkes kernels are `Σ_j α_j β_j exp(−β_j s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TppKind {
    Poisson { rate: f64 },
    /// Log-normal inter-event times; `mu` and `sigma` act on `log τ`.
    Renewal { mu: f64, sigma: f64 },
    Hawkes { mu: f64, alpha: Vec<f64>, beta: Vec<f64> },
}

impl TppKind {
    pub fn poisson() -> Self {
        TppKind::Poisson { rate: 1.0 }
    }

    /// Log-normal with mean 1 and standard deviation 6.
    pub fn renewal() -> Self {
        let s2 = 37f64.ln();
        TppKind::Renewal { mu: -s2 / 2.0, sigma: s2.sqrt() }
    }

    /// Single exponential kernel with branching ratio 0.8 and a stationary
    /// rate of one event per unit time.
    pub fn hawkes1() -> Self {
        TppKind::Hawkes { mu: 0.2, alpha: vec![0.8], beta: vec![1.0] }
    }

    pub fn hawkes2() -> Self {
        TppKind::Hawkes { mu: 0.2, alpha: vec![0.4, 0.4], beta: vec![1.0, 20.0] }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "poisson" => Some(Self::poisson()),
            "renewal" => Some(Self::renewal()),
            "hawkes1" => Some(Self::hawkes1()),
            "hawkes2" => Some(Self::hawkes2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TppKind::Poisson { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                Err(Error::config("tpp.rate", "must be positive"))
            }
            TppKind::Renewal { mu, sigma } if !(mu.is_finite() && *sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::config("tpp.sigma", "need finite mu and positive sigma"))
            }
            TppKind::Hawkes { mu, alpha, beta } => {
                if !(*mu > 0.0 && mu.is_finite()) {
                    return Err(Error::config("tpp.mu", "must be positive"));
                }
                if alpha.is_empty() || alpha.len() != beta.len() {
                    return Err(Error::config("tpp.alpha", "alpha and beta need the same nonzero length"));
                }
                if alpha.iter().any(|a| !(*a >= 0.0)) || beta.iter().any(|b| !(*b > 0.0)) {
                    return Err(Error::config("tpp.beta", "need alpha ≥ 0 and beta > 0"));
                }
                if alpha.iter().sum::<f64>() >= 1.0 {
                    return Err(Error::config("tpp.alpha", "branching ratio must be below 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Exact negative log-likelihood of a sequence observed on `[0, t_n]`.
    pub fn nll(&self, times: &[f64]) -> f64 {
        let Some(&last) = times.last() else { return 0.0 };
        match self {
            TppKind::Poisson { rate } => rate * last - times.len() as f64 * rate.ln(),
            TppKind::Renewal { mu, sigma } => {
                let mut prev = 0.0;
                let mut total = 0.0;
                for &t in times {
                    total -= lognormal_log_pdf(t - prev, *mu, *sigma);
                    prev = t;
                }
                total
            }
            TppKind::Hawkes { mu, alpha, beta } => {
                // S_j(t) = Σ_{t_i<t} α_j β_j e^{−β_j (t − t_i)}, advanced event by event.
                let mut s = vec![0.0; alpha.len()];
                let mut prev = 0.0;
                let mut total = mu * last;
                for &t in times {
                    let dt = t - prev;
                    for (sj, bj) in s.iter_mut().zip(beta) {
                        *sj *= (-bj * dt).exp();
                    }
                    total -= (mu + s.iter().sum::<f64>()).ln();
                    for ((sj, aj), bj) in s.iter_mut().zip(alpha).zip(beta) {
                        *sj += aj * bj;
                        total += aj * (1.0 - (-bj * (last - t)).exp());
                    }
                    prev = t;
                }
                total
            }
        }
    }
}

fn lognormal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x.ln() - mu) / sigma;
    -0.5 * z * z - x.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequenceDataset {
    pub kind: TppKind,
    pub sequences: Vec<Vec<f64>>,
    /// Ground-truth NLL per sequence under the generating process.
    pub nll: Option<Vec<f64>>,
}

impl EventSequenceDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            let mut prev = 0.0;
            for &t in seq {
                if !(t > prev) || !t.is_finite() {
                    return Err(Error::Invalid(format!("sequence {i} is not strictly increasing from 0")));
                }
                prev = t;
            }
        }
        if let Some(nll) = &self.nll {
            if nll.len() != self.sequences.len() {
                return Err(Error::Invalid("one NLL per sequence expected".into()));
            }
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Total ground-truth NLL divided by the number of events.
    pub fn per_event_nll(&self) -> Option<f64> {
        let nll = self.nll.as_ref()?;
        Some(nll.iter().sum::<f64>() / self.num_events().max(1) as f64)
    }

    /// Sub-dataset of sequences `idx`.
    pub fn subset(&self, idx: std::ops::Range<usize>) -> Self {
        Self {
            kind: self.kind.clone(),
            sequences: self.sequences[idx.clone()].to_vec(),
            nll: self.nll.as_ref().map(|v| v[idx].to_vec()),
        }
    }

    /// 60/20/20 train/val/test by sequence index.
    pub fn splits(&self) -> [Self; 3] {
        let [a, b, c] = super::partition(self.sequences.len());
        [self.subset(a), self.subset(b), self.subset(c)]
    }
}

/// Draws `n_seq` sequences of `seq_len` events. Sequence `i` uses its own
/// random stream, so sequences can be generated independently.
pub fn gen_tpp(kind: &TppKind, n_seq: usize, seq_len: usize, seed: u64) -> Result<EventSequenceDataset> {
    kind.validate()?;
    if n_seq == 0 || seq_len == 0 {
        return Err(Error::config("dataset.n", "need at least one sequence of one event"));
    }
    let sequences: Vec<Vec<f64>> = (0..n_seq)
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            sample_sequence(kind, seq_len, &mut rng)
        })
        .collect();
    let nll = sequences.iter().map(|s| kind.nll(s)).collect();
    let ds = EventSequenceDataset { kind: kind.clone(), sequences, nll: Some(nll) };
    ds.validate()?;
    Ok(ds)
}

fn sample_sequence<R: Rng>(kind: &TppKind, len: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut t = 0.0;
    match kind {
        TppKind::Poisson { rate } => {
            while out.len() < len {
                let w: f64 = Exp1.sample(rng);
                push_after(&mut out, &mut t, w / rate);
            }
        }
        TppKind::Renewal { mu, sigma } => {
            let d = LogNormal::new(*mu, *sigma).expect("validated");
            while out.len() < len {
                push_after(&mut out, &mut t, d.sample(rng));
            }
        }
        TppKind::Hawkes { mu, alpha, beta } => {
            // Ogata thinning. Between events the intensity only decays, so its
            // value right after the current time bounds it until the next
            // candidate.
            let mut s = vec![0.0; alpha.len()];
            while out.len() < len {
                let bound = mu + s.iter().sum::<f64>();
                let w: f64 = Exp1.sample(rng);
                let w = w / bound;
                t += w;
                for (sj, bj) in s.iter_mut().zip(beta) {
                    *sj *= (-bj * w).exp();
                }
                let lambda = mu + s.iter().sum::<f64>();
                if rng.random::<f64>() * bound <= lambda && out.last().is_none_or(|&p| t > p) {
                    out.push(t);
                    for ((sj, aj), bj) in s.iter_mut().zip(alpha).zip(beta) {
                        *sj += aj * bj;
                    }
                }
            }
        }
    }
    out
}

/// Appends `t + w`, skipping draws that would not strictly increase the
/// sequence in floating point.
fn push_after(out: &mut Vec<f64>, t: &mut f64, w: f64) {
    let next = *t + w;
    if next > *t {
        *t = next;
        out.push(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_mean_inter_event() {
        let ds = gen_tpp(&TppKind::poisson(), 1000, 100, 0).unwrap();
        let total: f64 = ds.sequences.iter().map(|s| s.last().unwrap()).sum();
        let mean = total / ds.num_events() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let nll = ds.per_event_nll().unwrap();
        assert!((nll - 1.0).abs() < 0.02, "{nll}");
    }

    #[test]
    fn sequences_increase_and_are_reproducible() {
        for kind in ["poisson", "renewal", "hawkes1", "hawkes2"] {
            let k = TppKind::by_name(kind).unwrap();
            let a = gen_tpp(&k, 20, 50, 3).unwrap();
            a.validate().unwrap();
            assert!(a.sequences.iter().all(|s| s.len() == 50));
            assert_eq!(a, gen_tpp(&k, 20, 50, 3).unwrap());
            // Sequence i depends only on (seed, i).
            let b = gen_tpp(&k, 5, 50, 3).unwrap();
            assert_eq!(a.sequences[4], b.sequences[4]);
        }
    }

    #[test]
    fn hawkes_nll_matches_direct_formula() {
        let k = TppKind::hawkes2();
        let TppKind::Hawkes { mu, alpha, beta } = &k else { unreachable!() };
        let times = [0.3, 0.35, 1.2, 4.0, 4.01];
        let lambda = |t: f64| {
            mu + times
                .iter()
                .filter(|&&ti| ti < t)
                .map(|&ti| (0..2).map(|j| alpha[j] * beta[j] * (-beta[j] * (t - ti)).exp()).sum::<f64>())
                .sum::<f64>()
        };
        // Compensator by midpoint quadrature on each inter-event interval,
        // where the intensity is smooth.
        let mut integral = 0.0;
        let mut prev = 0.0;
        for &t in &times {
            let n = 20_000;
            let h = (t - prev) / n as f64;
            integral += (0..n).map(|i| lambda(prev + (i as f64 + 0.5) * h) * h).sum::<f64>();
            prev = t;
        }
        let direct = integral - times.iter().map(|&t| lambda(t).ln()).sum::<f64>();
        assert!((k.nll(&times) - direct).abs() < 1e-5, "{} vs {direct}", k.nll(&times));
    }

    #[test]
    fn renewal_nll_is_sum_of_log_densities() {
        let k = TppKind::renewal();
        let TppKind::Renewal { mu, sigma } = k else { unreachable!() };
        // Mean 1, std 6.
        let mean = (mu + sigma * sigma / 2.0).exp();
        let var = (sigma * sigma).exp_m1() * (2.0 * mu + sigma * sigma).exp();
        assert!((mean - 1.0).abs() < 1e-12 && (var.sqrt() - 6.0).abs() < 1e-12);
        let times = [0.5, 2.5];
        let want = -lognormal_log_pdf(0.5, mu, sigma) - lognormal_log_pdf(2.0, mu, sigma);
        assert_eq!(k.nll(&times), want);
    }

    #[test]
    fn invalid_processes_rejected() {
        let bad = TppKind::Hawkes { mu: 0.2, alpha: vec![0.6, 0.5], beta: vec![1.0, 2.0] };
        assert!(gen_tpp(&bad, 1, 1, 0).is_err());
        assert!(gen_tpp(&TppKind::Poisson { rate: 0.0 }, 1, 1, 0).is_err());
        assert!(gen_tpp(&TppKind::poisson(), 0, 1, 0).is_err());
    }
}
