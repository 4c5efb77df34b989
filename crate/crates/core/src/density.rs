//! Time-dependent densities `p(x, t)` on `R^d` pushed forward from a standard
//! Gaussian: by a coupling flow (exact log-determinant) or by a continuous
//! normalizing flow (exact trace, small `d`).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{Architecture, FlowSpec, FlowStack};
use crate::nn::Activation;
use crate::ode::{batched_solve, Dynamics, SolverConfig, SolverStats, VectorField};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Largest dimension for which the CNF computes the trace column by column.
pub const CNF_MAX_DIM: usize = 3;

/// `log N(z; 0, I)` per row.
pub fn gaussian_log_prob(g: &mut Tape, z: Var) -> Var {
    let d = g.shape(z).1 as f64;
    let sq = g.square(z);
    let r = g.row_sums(sq);
    let r = g.scale(r, -0.5);
    g.add_scalar(r, -0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

fn standard_normal<R: Rng>(n: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::raw(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect())
}

/// `p(x, t) = q(F⁻¹(t, x)) |det ∂F⁻¹/∂x|` with coupling layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingDensity {
    pub dim: usize,
    pub flow: FlowStack,
}

impl CouplingDensity {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        layers: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let spec = FlowSpec::new(Architecture::Coupling, dim, layers).hidden(hidden.to_vec());
        Self::from_flow(FlowStack::new(ps, name, &spec, rng)?)
    }

    pub fn from_flow(flow: FlowStack) -> Result<Self> {
        if !flow.has_analytic_inverse() {
            return Err(Error::Invalid("a coupling density needs analytic layers".into()));
        }
        Ok(Self { dim: flow.dim, flow })
    }

    /// `log p(x_i, t_i)` per row, `n × 1`.
    pub fn log_prob(&self, g: &mut Tape, x: Var, t: Var) -> Result<Var> {
        let (z, ld) = self.flow.inverse_log_det(g, t, x)?;
        let lq = gaussian_log_prob(g, z);
        Ok(g.add(lq, ld))
    }

    pub fn log_prob_values(&self, ps: &ParamSet, x: &Tensor, times: &[f64]) -> Result<Vec<f64>> {
        check_points(self.dim, x, times)?;
        let mut g = Tape::no_grad(ps);
        let xv = g.constant(x.clone());
        let t = g.constant(Tensor::column(times));
        let lp = self.log_prob(&mut g, xv, t)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// `F(t, z)` for `z ~ q`; at `t = 0` these are the base draws.
    pub fn sample<R: Rng>(&self, ps: &ParamSet, t: f64, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Invalid("need at least one sample".into()));
        }
        let z = standard_normal(n, self.dim, rng);
        self.flow.eval(ps, &vec![t; n], &z)
    }
}

fn check_points(dim: usize, x: &Tensor, times: &[f64]) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::shape("log_prob", format!("points have {} columns, model has {dim}", x.cols())));
    }
    if times.len() != x.rows() {
        return Err(Error::shape("log_prob", format!("{} times for {} points", times.len(), x.rows())));
    }
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::Invalid("density times must be finite and non-negative".into()));
    }
    Ok(())
}

/// A field that also reports its divergence `tr(∂f/∂x)` per row.
pub trait DivergenceField: Dynamics {
    fn eval_with_divergence(&self, g: &mut Tape, t: Var, x: Var) -> (Var, Var);
}

impl DivergenceField for VectorField {
    fn eval_with_divergence(&self, g: &mut Tape, t: Var, x: Var) -> (Var, Var) {
        let (n, d) = g.shape(x);
        let inp = g.hcat(&[x, t]);
        let mut out = None;
        let mut div: Option<Var> = None;
        // One directional derivative per coordinate; only the diagonal entry
        // of each is kept.
        for j in 0..d {
            let mut e = Tensor::zeros(n, d + 1);
            for i in 0..n {
                e.set(i, j, 1.0);
            }
            let dir = g.constant(e);
            let (y, dy) = self.net.forward_with_tangent(g, inp, dir);
            out.get_or_insert(y);
            let djj = g.cols(dy, j, j + 1);
            div = Some(match div {
                Some(acc) => g.add(acc, djj),
                None => djj,
            });
        }
        (out.expect("d ≥ 1"), div.expect("d ≥ 1"))
    }
}

/// `f(t, x) = A x`, whose divergence is `tr A` everywhere.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: Tensor,
}

impl Dynamics for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn eval(&self, g: &mut Tape, _t: Var, x: Var) -> Var {
        let a = g.constant(self.a.clone());
        g.linear(x, a)
    }
}

impl DivergenceField for LinearField {
    fn eval_with_divergence(&self, g: &mut Tape, t: Var, x: Var) -> (Var, Var) {
        let n = g.shape(x).0;
        let f = self.eval(g, t, x);
        let div = g.constant(Tensor::full(n, 1, self.a.trace()));
        (f, div)
    }
}

/// Backward-in-time augmented system. With `τ = t_end − s` the state
/// `[x, ℓ]` follows `dx/dτ = −f(t_end − τ, x)` and `dℓ/dτ = tr ∂f/∂x`.
struct Reversed<'a, F: ?Sized> {
    field: &'a F,
    t_end: Tensor,
}

impl<F: DivergenceField + ?Sized> Dynamics for Reversed<'_, F> {
    fn dim(&self) -> usize {
        self.field.dim() + 1
    }

    fn eval(&self, g: &mut Tape, tau: Var, state: Var) -> Var {
        let d = self.field.dim();
        let x = g.cols(state, 0, d);
        let end = g.constant(self.t_end.clone());
        let s = g.sub(end, tau);
        let (f, div) = self.field.eval_with_divergence(g, s, x);
        let nf = g.neg(f);
        g.hcat(&[nf, div])
    }
}

/// `log p(x_i, t_i) = log q(x_i(0)) − ∫₀^{t_i} tr ∂f/∂x ds`, integrating
/// every row backwards from its own `t_i` in one batched solve.
pub fn cnf_log_prob(
    g: &mut Tape,
    field: &dyn DivergenceField,
    x: Var,
    times: &[f64],
    solver: &SolverConfig,
) -> Result<(Var, SolverStats)> {
    let (n, d) = g.shape(x);
    if d > CNF_MAX_DIM {
        return Err(Error::Invalid(format!("exact-trace CNF supports d ≤ {CNF_MAX_DIM}, got {d}")));
    }
    if times.len() != n {
        return Err(Error::shape("cnf_log_prob", format!("{} times for {n} points", times.len())));
    }
    let aug = Reversed { field, t_end: Tensor::column(times) };
    let zero = g.constant(Tensor::zeros(n, 1));
    let start = g.hcat(&[x, zero]);
    let sol = batched_solve(g, &aug, start, times, solver)?;
    let z = g.cols(sol.state, 0, d);
    let ell = g.cols(sol.state, d, d + 1);
    let lq = gaussian_log_prob(g, z);
    Ok((g.sub(lq, ell), sol.stats))
}

/// Continuous normalizing flow with a neural field `f(t, x) = MLP([x, t])`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cnf {
    pub field: VectorField,
    pub solver: SolverConfig,
}

impl Cnf {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: &[usize],
        solver: SolverConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if dim > CNF_MAX_DIM {
            return Err(Error::config("dim", format!("exact-trace CNF supports d ≤ {CNF_MAX_DIM}")));
        }
        solver.validate()?;
        let field = VectorField::new(ps, name, dim, hidden, Activation::Tanh, rng)?;
        Ok(Self { field, solver })
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    pub fn log_prob(&self, g: &mut Tape, x: Var, times: &[f64]) -> Result<(Var, SolverStats)> {
        cnf_log_prob(g, &self.field, x, times, &self.solver)
    }

    pub fn log_prob_values(&self, ps: &ParamSet, x: &Tensor, times: &[f64]) -> Result<Vec<f64>> {
        check_points(self.dim(), x, times)?;
        let mut g = Tape::no_grad(ps);
        let xv = g.constant(x.clone());
        let (lp, _) = self.log_prob(&mut g, xv, times)?;
        Ok(g.value(lp).data().to_vec())
    }
}

/// Square grid over `[lo, hi]²` with `k × k` cell midpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub lo: f64,
    pub hi: f64,
    pub k: usize,
}

impl Grid2 {
    pub fn cell_area(&self) -> f64 {
        let h = (self.hi - self.lo) / self.k as f64;
        h * h
    }

    pub fn points(&self) -> Tensor {
        let h = (self.hi - self.lo) / self.k as f64;
        let mut v = Vec::with_capacity(2 * self.k * self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                v.push(self.lo + (i as f64 + 0.5) * h);
                v.push(self.lo + (j as f64 + 0.5) * h);
            }
        }
        Tensor::raw(self.k * self.k, 2, v)
    }

    /// Midpoint rule for `∫ exp(log_p)` given log-densities at [`points`](Self::points).
    pub fn integrate(&self, log_p: &[f64]) -> f64 {
        log_p.iter().map(|l| l.exp()).sum::<f64>() * self.cell_area()
    }
}

/// Grid integral of a 2-d density at time `t`, evaluated in chunks.
pub fn grid_integral(
    grid: Grid2,
    t: f64,
    chunk: usize,
    log_prob: &mut dyn FnMut(&Tensor, &[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let pts = grid.points();
    let n = pts.rows();
    let mut lp = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        lp.extend(log_prob(&pts.select_rows(&idx), &vec![t; end - start])?);
        start = end;
    }
    Ok(grid.integrate(&lp))
}

/// Stopping rule for [`adaptive_integral`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refine {
    /// Target for the summed error estimate.
    pub tol: f64,
    /// Density evaluations allowed, including the base grid.
    pub max_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveIntegral {
    pub value: f64,
    /// Sum over cells of `|split estimate − unsplit estimate|`.
    pub error: f64,
    pub evaluations: usize,
}

struct Cell {
    x: f64,
    y: f64,
    h: f64,
    /// Density at the four quarter-cell midpoints.
    kids: [f64; 4],
    err: f64,
}

impl Cell {
    fn value(&self) -> f64 {
        self.kids.iter().sum::<f64>() * self.h * self.h / 4.0
    }

    fn children(&self) -> [(f64, f64); 4] {
        let q = self.h / 4.0;
        let (x, y) = (self.x, self.y);
        [(x - q, y - q), (x - q, y + q), (x + q, y - q), (x + q, y + q)]
    }
}

/// Midpoint rule on `grid` with global refinement: each round splits the
/// cells holding the larger half of the error estimate, until the estimate
/// is below `refine.tol` or the point budget is spent.
///
/// A uniform grid cannot see features much narrower than its spacing, and
/// trained densities often have them (thin rings, near-point masses).
pub fn adaptive_integral(
    grid: Grid2,
    t: f64,
    refine: Refine,
    log_prob: &mut dyn FnMut(&Tensor, &[f64]) -> Result<Vec<f64>>,
) -> Result<AdaptiveIntegral> {
    let mut eval = |centers: &[(f64, f64)]| -> Result<Vec<f64>> {
        let flat: Vec<f64> = centers.iter().flat_map(|&(x, y)| [x, y]).collect();
        let lp = log_prob(&Tensor::raw(centers.len(), 2, flat), &vec![t; centers.len()])?;
        Ok(lp.into_iter().map(f64::exp).collect())
    };
    let pts = grid.points();
    let centers: Vec<(f64, f64)> = (0..pts.rows()).map(|i| (pts.get(i, 0), pts.get(i, 1))).collect();
    let h = (grid.hi - grid.lo) / grid.k as f64;
    let p = eval(&centers)?;
    // Cells centred at `centers` with widths `h` and own densities `p`,
    // evaluated at their quarter points.
    let mut split = |centers: &[(f64, f64)], p: &[f64], h: &[f64]| -> Result<Vec<Cell>> {
        let pts: Vec<(f64, f64)> = centers
            .iter()
            .zip(h)
            .flat_map(|(&(x, y), &h)| Cell { x, y, h, kids: [0.0; 4], err: 0.0 }.children())
            .collect();
        let pk = eval(&pts)?;
        Ok((0..centers.len())
            .map(|i| {
                let ((x, y), h) = (centers[i], h[i]);
                let kids = [pk[4 * i], pk[4 * i + 1], pk[4 * i + 2], pk[4 * i + 3]];
                let err = (kids.iter().sum::<f64>() / 4.0 - p[i]).abs() * h * h;
                Cell { x, y, h, kids, err }
            })
            .collect())
    };

    let mut cells = split(&centers, &p, &vec![h; centers.len()])?;
    let mut evaluations = 5 * centers.len();
    loop {
        let error: f64 = cells.iter().map(|c| c.err).sum();
        if error <= refine.tol || evaluations >= refine.max_points {
            let value = cells.iter().map(Cell::value).sum();
            return Ok(AdaptiveIntegral { value, error, evaluations });
        }
        cells.sort_by(|a, b| b.err.total_cmp(&a.err));
        let (mut take, mut acc) = (0, 0.0);
        while take < cells.len() && acc < error / 2.0 {
            acc += cells[take].err;
            take += 1;
        }
        take = take.min((refine.max_points - evaluations) / 16).max(1);
        let mut centers = Vec::with_capacity(4 * take);
        let mut p = Vec::with_capacity(4 * take);
        let mut widths = Vec::with_capacity(4 * take);
        for c in cells.drain(..take) {
            centers.extend(c.children());
            p.extend(c.kids);
            widths.extend([c.h / 2.0; 4]);
        }
        cells.extend(split(&centers, &p, &widths)?);
        evaluations += 4 * centers.len();
    }
}
