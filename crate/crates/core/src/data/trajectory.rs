//! Trajectory datasets: closed-form periodic flows, the sink, the
//! Lotka–Volterra ellipse and the stiff problem.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{partition, rng_for, Split};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flows::matrix_exp;
use crate::ode::{solve_values, stiff_reference, FnField, SolverConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Observations `(x0, t) → target` grouped by trajectory.
///
/// Trajectory `i` starts at `x0[i]` at time `start[i]` (zero except for the
/// stiff pairs) and is observed at `times[i, j]`; the matching target is row
/// `i·m + j` of `targets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub name: String,
    pub split: Split,
    pub dim: usize,
    pub start: Vec<f64>,
    pub x0: Tensor,
    pub times: Tensor,
    pub targets: Tensor,
}

/// One row per observation, ready to feed a batched model.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub start: Vec<f64>,
    pub t: Vec<f64>,
    pub x0: Tensor,
    pub target: Tensor,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query times per trajectory.
    pub fn m(&self) -> usize {
        self.times.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, d) = (self.len(), self.m(), self.dim);
        if self.x0.cols() != d || self.start.len() != n || self.times.rows() != n {
            return Err(Error::Invalid(format!("{}: inconsistent trajectory shapes", self.name)));
        }
        if self.targets.rows() != n * m || self.targets.cols() != d {
            return Err(Error::Invalid(format!(
                "{}: expected {}×{d} targets, found {:?}",
                self.name,
                n * m,
                self.targets.shape()
            )));
        }
        if !(self.x0.is_finite() && self.times.is_finite() && self.targets.is_finite()) {
            return Err(Error::NonFinite("trajectory dataset"));
        }
        Ok(())
    }

    /// Flattens trajectories `idx` into observation rows.
    pub fn observations(&self, idx: &[usize]) -> Observations {
        let (m, d) = (self.m(), self.dim);
        let rows = idx.len() * m;
        let mut start = Vec::with_capacity(rows);
        let mut t = Vec::with_capacity(rows);
        let mut x0 = Vec::with_capacity(rows * d);
        let mut target = Vec::with_capacity(rows * d);
        for &i in idx {
            for j in 0..m {
                start.push(self.start[i]);
                t.push(self.times.get(i, j));
                x0.extend_from_slice(self.x0.row_slice(i));
                target.extend_from_slice(self.targets.row_slice(i * m + j));
            }
        }
        Observations {
            start,
            t,
            x0: Tensor::raw(rows, d, x0),
            target: Tensor::raw(rows, d, target),
        }
    }

    pub fn all_observations(&self) -> Observations {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.observations(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySplits {
    pub train: TrajectoryDataset,
    pub val: TrajectoryDataset,
    pub test: TrajectoryDataset,
    pub extrapolate_space: Option<TrajectoryDataset>,
    pub extrapolate_time: Option<TrajectoryDataset>,
}

impl TrajectorySplits {
    pub fn get(&self, split: Split) -> Option<&TrajectoryDataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => Some(&self.val),
            Split::Test => Some(&self.test),
            Split::ExtrapolateSpace => self.extrapolate_space.as_ref(),
            Split::ExtrapolateTime => self.extrapolate_time.as_ref(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrajectoryDataset> {
        Split::ALL.into_iter().filter_map(|s| self.get(s))
    }
}

/// Extrapolation ranges shared by every trajectory family.
pub const EXTRAPOLATE_X: (f64, f64) = (-4.0, 4.0);
pub const EXTRAPOLATE_T_MAX: f64 = 30.0;
const DEFAULT_T: (f64, f64) = (0.0, 10.0);

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws `n` initial states and `n × m` times, then fills targets with
/// `solve(x0 rows, t per row)`.
#[allow(clippy::too_many_arguments)]
fn build(
    name: &str,
    split: Split,
    n: usize,
    m: usize,
    dim: usize,
    x_range: (f64, f64),
    t_range: (f64, f64),
    rng: &mut impl Rng,
    solve: &dyn Fn(&Tensor, &[f64]) -> Result<Tensor>,
) -> Result<TrajectoryDataset> {
    let x0: Vec<f64> = (0..n * dim).map(|_| uniform(rng, x_range)).collect();
    let times: Vec<f64> = (0..n * m).map(|_| uniform(rng, t_range)).collect();
    let mut ds = TrajectoryDataset {
        name: name.to_string(),
        split,
        dim,
        start: vec![0.0; n],
        x0: Tensor::raw(n, dim, x0),
        times: Tensor::raw(n, m, times),
        targets: Tensor::zeros(n * m, dim),
    };
    let obs = ds.all_observations();
    ds.targets = solve(&obs.x0, &obs.t)?;
    ds.validate()?;
    Ok(ds)
}

struct Ranges {
    x: (f64, f64),
    t: (f64, f64),
    x_extra: (f64, f64),
}

fn standard_splits(
    name: &str,
    n: usize,
    m: usize,
    dim: usize,
    seed: u64,
    ranges: Ranges,
    solve: &dyn Fn(&Tensor, &[f64]) -> Result<Tensor>,
) -> Result<TrajectorySplits> {
    if n == 0 || m == 0 {
        return Err(Error::config("dataset.n", "need at least one trajectory and one query time"));
    }
    let [train, val, test] = partition(n);
    // Splits draw from separate streams so they are disjoint draws and stay
    // fixed when another split's size changes.
    let mk = |split: Split, count: usize, x: (f64, f64), t: (f64, f64)| {
        let mut rng = rng_for(seed, split as u64);
        build(name, split, count, m, dim, x, t, &mut rng, solve)
    };
    let extra = test.len().max(1);
    Ok(TrajectorySplits {
        train: mk(Split::Train, train.len(), ranges.x, ranges.t)?,
        val: mk(Split::Val, val.len(), ranges.x, ranges.t)?,
        test: mk(Split::Test, test.len(), ranges.x, ranges.t)?,
        extrapolate_space: Some(mk(Split::ExtrapolateSpace, extra, ranges.x_extra, ranges.t)?),
        extrapolate_time: Some(mk(
            Split::ExtrapolateTime,
            extra,
            ranges.x,
            (ranges.t.1, EXTRAPOLATE_T_MAX),
        )?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicKind {
    Sine,
    Sawtooth,
    Square,
    Triangle,
}

impl PeriodicKind {
    pub const ALL: [PeriodicKind; 4] = [
        PeriodicKind::Sine,
        PeriodicKind::Sawtooth,
        PeriodicKind::Square,
        PeriodicKind::Triangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeriodicKind::Sine => "sine",
            PeriodicKind::Sawtooth => "sawtooth",
            PeriodicKind::Square => "square",
            PeriodicKind::Triangle => "triangle",
        }
    }

    /// Closed-form flow `F(t, x)`.
    pub fn flow(self, t: f64, x: f64) -> f64 {
        match self {
            PeriodicKind::Sine => x + t.sin(),
            PeriodicKind::Sawtooth => x + t - t.floor(),
            PeriodicKind::Square => x + sign(t.sin()),
            PeriodicKind::Triangle => x + triangle(t),
        }
    }
}

/// Sign with `sign(0) = 0`, unlike `f64::signum`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `∫₀ᵗ sign(sin u) du` for `t ≥ 0`: rises to π over the first half period
/// and falls back to 0 over the second.
fn triangle(t: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let s = t.rem_euclid(tau);
    if s <= std::f64::consts::PI {
        s
    } else {
        tau - s
    }
}

/// Scalar periodic signals `x + g(t)`.
pub fn gen_periodic(
    kind: PeriodicKind,
    n: usize,
    m: usize,
    seed: u64,
    x_range: (f64, f64),
    t_range: (f64, f64),
) -> Result<TrajectorySplits> {
    check_range("x_range", x_range)?;
    check_range("t_range", t_range)?;
    if t_range.0 < 0.0 || t_range.1 >= EXTRAPOLATE_T_MAX {
        return Err(Error::config("t_range", "must lie within [0, 30)"));
    }
    let solve = |x0: &Tensor, t: &[f64]| -> Result<Tensor> {
        let v = x0.data().iter().zip(t).map(|(&x, &t)| kind.flow(t, x)).collect();
        Ok(Tensor::raw(t.len(), 1, v))
    };
    let ranges = Ranges { x: x_range, t: t_range, x_extra: EXTRAPOLATE_X };
    standard_splits(kind.name(), n, m, 1, seed, ranges, &solve)
}

fn check_range(field: &'static str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(Error::config(field, format!("({lo}, {hi}) is not a proper interval")))
    }
}

/// The sink matrix; its eigenvalues are `−1 ± i√21`.
pub fn sink_matrix() -> Tensor {
    Tensor::raw(2, 2, vec![-4.0, 10.0, -3.0, 2.0])
}

/// Sink trajectories `exp(A t) x0` with `x0 ~ U([0,1]²)`.
pub fn gen_linear_system(n: usize, m: usize, seed: u64) -> Result<TrajectorySplits> {
    let a = sink_matrix();
    let solve = |x0: &Tensor, t: &[f64]| -> Result<Tensor> {
        let mut out = Vec::with_capacity(t.len() * 2);
        for (i, &ti) in t.iter().enumerate() {
            let e = matrix_exp(&a.scale(ti))?;
            let x = x0.row_slice(i);
            out.push(e.get(0, 0) * x[0] + e.get(0, 1) * x[1]);
            out.push(e.get(1, 0) * x[0] + e.get(1, 1) * x[1]);
        }
        Ok(Tensor::raw(t.len(), 2, out))
    };
    let ranges = Ranges { x: (0.0, 1.0), t: DEFAULT_T, x_extra: (1.0, 2.0) };
    standard_splits("sink", n, m, 2, seed, ranges, &solve)
}

/// Lotka–Volterra field `((2/3)x₁ − (2/3)x₁x₂, x₁x₂ − x₂)`.
pub fn lotka_volterra() -> FnField<impl Fn(&mut Tape, Var, Var) -> Var> {
    FnField {
        dim: 2,
        f: |g: &mut Tape, _t: Var, x: Var| {
            let x1 = g.cols(x, 0, 1);
            let x2 = g.cols(x, 1, 2);
            let prod = g.mul(x1, x2);
            let d1 = g.sub(x1, prod);
            let d1 = g.scale(d1, 2.0 / 3.0);
            let d2 = g.sub(prod, x2);
            g.hcat(&[d1, d2])
        },
    }
}

/// First integral of [`lotka_volterra`], constant along every orbit.
pub fn lotka_volterra_invariant(x: &[f64]) -> f64 {
    (2.0 / 3.0) * x[1].ln() - (2.0 / 3.0) * x[1] + x[0].ln() - x[0]
}

/// Solver used for the ellipse ground truth.
pub const ELLIPSE_SOLVER: SolverConfig = SolverConfig::Dopri5 {
    rtol: 1e-10,
    atol: 1e-12,
    h0: None,
    max_steps: 1_000_000,
};

/// Lotka–Volterra trajectories with `x0 ~ U([0,1]²)`.
pub fn gen_ellipse(n: usize, m: usize, seed: u64) -> Result<TrajectorySplits> {
    let field = lotka_volterra();
    let ps = ParamSet::new();
    let solve = |x0: &Tensor, t: &[f64]| -> Result<Tensor> {
        Ok(solve_values(&ps, &field, x0, t, &ELLIPSE_SOLVER)?.0)
    };
    let ranges = Ranges { x: (0.0, 1.0), t: DEFAULT_T, x_extra: (1.0, 2.0) };
    standard_splits("ellipse", n, m, 2, seed, ranges, &solve)
}

/// Points of the evaluation grid for the stiff problem.
pub const STIFF_GRID: usize = 301;

/// Stiff pairs `(t₁, x(t₁)) → (t₂, x(t₂))` with `t₂ = t₁ + interval_len`.
///
/// Pairs are split 80/20 into train and val; the test split is a single
/// trajectory from `x0 = 0` observed on a uniform grid over `[0, t_max]`.
pub fn gen_stiff(interval_len: f64, t_max: f64, n: usize, seed: u64) -> Result<TrajectorySplits> {
    if !(interval_len > 0.0 && t_max > interval_len && t_max.is_finite()) {
        return Err(Error::config("stiff", "need 0 < interval_len < t_max"));
    }
    if n < 2 {
        return Err(Error::config("dataset.n", "stiff data needs at least two pairs"));
    }
    let mut rng = rng_for(seed, 0);
    let mut start: Vec<f64> = (0..n).map(|_| uniform(&mut rng, (0.0, t_max - interval_len))).collect();
    start[0] = 0.0;
    let pairs = |split: Split, idx: std::ops::Range<usize>| {
        let s: Vec<f64> = start[idx].to_vec();
        let k = s.len();
        let t2: Vec<f64> = s.iter().map(|t| t + interval_len).collect();
        TrajectoryDataset {
            name: "stiff".into(),
            split,
            dim: 1,
            x0: Tensor::raw(k, 1, s.iter().map(|&t| stiff_reference(t)).collect()),
            targets: Tensor::raw(k, 1, t2.iter().map(|&t| stiff_reference(t)).collect()),
            times: Tensor::raw(k, 1, t2),
            start: s,
        }
    };
    let cut = (n * 4) / 5;
    let grid: Vec<f64> = (0..STIFF_GRID)
        .map(|i| t_max * i as f64 / (STIFF_GRID - 1) as f64)
        .collect();
    let test = TrajectoryDataset {
        name: "stiff".into(),
        split: Split::Test,
        dim: 1,
        start: vec![0.0],
        x0: Tensor::zeros(1, 1),
        targets: Tensor::raw(STIFF_GRID, 1, grid.iter().map(|&t| stiff_reference(t)).collect()),
        times: Tensor::raw(1, STIFF_GRID, grid),
    };
    let out = TrajectorySplits {
        train: pairs(Split::Train, 0..cut),
        val: pairs(Split::Val, cut..n),
        test,
        extrapolate_space: None,
        extrapolate_time: None,
    };
    for ds in out.iter() {
        ds.validate()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn periodic_examples() {
        assert!((PeriodicKind::Sawtooth.flow(1.5, 0.2) - 0.7).abs() < 1e-15);
        assert_eq!(PeriodicKind::Square.flow(PI / 2.0, 0.0), 1.0);
        assert_eq!(PeriodicKind::Triangle.flow(PI, 0.0), PI);
        for k in PeriodicKind::ALL {
            assert_eq!(k.flow(0.0, 0.3), 0.3, "{k:?} must be the identity at t = 0");
        }
    }

    #[test]
    fn triangle_matches_numerical_integral() {
        for &t in &[0.5, 2.0, 3.5, 6.0, 7.0, 13.3, 29.0] {
            let n = 200_000;
            let h = t / n as f64;
            let quad: f64 = (0..n).map(|i| sign(((i as f64 + 0.5) * h).sin()) * h).sum();
            // Each sign change costs the midpoint rule at most one cell width.
            let tol = 2.0 * h * (t / PI + 1.0);
            assert!((triangle(t) - quad).abs() < tol, "t = {t}");
        }
    }

    #[test]
    fn periodic_splits_respect_ranges() {
        let s = gen_periodic(PeriodicKind::Sine, 50, 7, 3, (-2.0, 2.0), (0.0, 10.0)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 10, 10));
        assert_eq!(s.train.targets.rows(), 30 * 7);
        assert!(s.train.x0.data().iter().all(|x| (-2.0..2.0).contains(x)));
        assert!(s.train.times.data().iter().all(|t| (0.0..10.0).contains(t)));
        let space = s.extrapolate_space.as_ref().unwrap();
        assert!(space.x0.data().iter().all(|x| (-4.0..4.0).contains(x)));
        assert!(space.x0.max_abs() > 2.0);
        let time = s.extrapolate_time.as_ref().unwrap();
        assert!(time.times.data().iter().all(|t| (10.0..30.0).contains(t)));
        let obs = s.test.observations(&[3]);
        for j in 0..7 {
            assert_eq!(obs.target.get(j, 0), obs.x0.get(j, 0) + obs.t[j].sin());
        }
        assert!(gen_periodic(PeriodicKind::Sine, 5, 5, 0, (1.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_linear_system(20, 5, 11).unwrap();
        let b = gen_linear_system(20, 5, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_linear_system(20, 5, 12).unwrap();
        assert_ne!(a.train.x0, c.train.x0);
        // Enlarging the dataset must not move the other streams.
        let big = gen_linear_system(40, 5, 11).unwrap();
        assert_eq!(big.train.x0.row_slice(0), a.train.x0.row_slice(0));
    }

    #[test]
    fn sink_examples() {
        let s = gen_linear_system(10, 4, 0).unwrap();
        let a = sink_matrix();
        let obs = s.train.all_observations();
        for i in 0..obs.t.len() {
            let e = matrix_exp(&a.scale(obs.t[i])).unwrap();
            let want = Tensor::row(obs.x0.row_slice(i)).matmul_t(false, &e, true);
            assert!(want.sub(&Tensor::row(obs.target.row_slice(i))).max_abs() < 1e-14);
        }
        let e0 = matrix_exp(&a.scale(0.0)).unwrap();
        assert_eq!(e0, Tensor::identity(2));
        let extra = s.extrapolate_space.unwrap();
        assert!(extra.x0.data().iter().all(|x| (1.0..2.0).contains(x)));
    }

    #[test]
    fn sink_matches_high_accuracy_solver() {
        let s = gen_linear_system(5, 3, 2).unwrap();
        let obs = s.train.all_observations();
        let field = crate::ode::linear_field(sink_matrix());
        let ps = ParamSet::new();
        let (num, _) = solve_values(&ps, &field, &obs.x0, &obs.t, &ELLIPSE_SOLVER).unwrap();
        assert!(num.sub(&obs.target).max_abs() < 1e-8);
        // The origin is an equilibrium.
        let zero = Tensor::zeros(2, 2);
        let (z, _) = solve_values(&ps, &field, &zero, &[3.0, 7.0], &ELLIPSE_SOLVER).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn ellipse_conserves_first_integral() {
        let s = gen_ellipse(10, 4, 5).unwrap();
        for ds in [&s.train, &s.extrapolate_time.clone().unwrap()] {
            let obs = ds.all_observations();
            for i in 0..obs.t.len() {
                let h0 = lotka_volterra_invariant(obs.x0.row_slice(i));
                let h1 = lotka_volterra_invariant(obs.target.row_slice(i));
                assert!((h0 - h1).abs() < 1e-6, "row {i}: {h0} vs {h1}");
            }
        }
        let ps = ParamSet::new();
        let (z, _) =
            solve_values(&ps, &lotka_volterra(), &Tensor::zeros(1, 2), &[4.0], &ELLIPSE_SOLVER).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn stiff_pairs_follow_the_reference() {
        let s = gen_stiff(0.125, 15.0, 100, 9).unwrap();
        assert_eq!(s.train.start[0], 0.0);
        assert_eq!(s.train.x0.get(0, 0), 0.0);
        let h = 1e-5;
        for ds in [&s.train, &s.val] {
            for i in 0..ds.len() {
                let t2 = ds.times.get(i, 0);
                assert!((t2 - ds.start[i] - 0.125).abs() < 1e-12);
                assert!(t2 <= 15.0);
                let x = ds.targets.get(i, 0);
                let dx = (stiff_reference(t2 + h) - stiff_reference(t2 - h)) / (2.0 * h);
                let residual = dx + 1000.0 * x - 3000.0 + 2000.0 * (-t2).exp();
                assert!(residual.abs() < 1e-6, "t = {t2}: residual {residual}");
            }
        }
        assert_eq!(s.test.x0.get(0, 0), 0.0);
        assert_eq!(s.test.times.get(0, STIFF_GRID - 1), 15.0);
        assert!((s.test.targets.get(STIFF_GRID - 1, 0) - 3.0).abs() < 1e-5);
        assert!(gen_stiff(0.125, 15.0, 1, 0).is_err());
    }
}
