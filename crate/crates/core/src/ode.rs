//! Neural ODE baselines: fixed-step and adaptive solvers recorded on the
//! tape, so gradients come from backpropagating through the unrolled steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Right-hand side `f(t, x)`, evaluated on a batch. `t` is an `n × 1`
/// column, `x` is `n × d`.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn eval(&self, g: &mut Tape, t: Var, x: Var) -> Var;
}

/// Neural field `f(t, x) = MLP([x, t])`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VectorField {
    pub dim: usize,
    pub net: Mlp,
}

impl VectorField {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("vector field needs a positive dimension".into()));
        }
        let spec = MlpSpec::new(dim + 1, hidden.to_vec(), dim).activation(activation);
        let net = Mlp::new(ps, &format!("{name}.f"), spec, rng)?;
        Ok(Self { dim, net })
    }
}

impl Dynamics for VectorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        let inp = g.hcat(&[x, t]);
        self.net.forward(g, inp)
    }
}

/// Wraps a closure as [`Dynamics`], for analytic fields.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&mut Tape, Var, Var) -> Var> Dynamics for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        (self.f)(g, t, x)
    }
}

/// Evaluates `inner` at `t + offset_i` on row `i`, so a batched solve can
/// start each row at its own time.
pub struct Shifted<'a> {
    pub inner: &'a dyn Dynamics,
    /// `n × 1` start times.
    pub offset: Tensor,
}

impl Dynamics for Shifted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        let off = g.constant(self.offset.clone());
        let t = g.add(t, off);
        self.inner.eval(g, t, x)
    }
}

/// `f(t, x) = x Aᵀ`, i.e. `ẋ = A x` per row.
pub fn linear_field(a: Tensor) -> FnField<impl Fn(&mut Tape, Var, Var) -> Var> {
    let dim = a.rows();
    FnField {
        dim,
        f: move |g: &mut Tape, _t: Var, x: Var| {
            let av = g.constant(a.clone());
            g.linear(x, av)
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverConfig {
    Euler {
        steps: usize,
    },
    Rk4 {
        steps: usize,
    },
    Dopri5 {
        rtol: f64,
        atol: f64,
        /// First step size; chosen automatically when absent.
        #[serde(default)]
        h0: Option<f64>,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

fn default_max_steps() -> usize {
    10_000
}

impl SolverConfig {
    /// Adaptive solver at the usual training tolerances.
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig::Dopri5 {
            rtol,
            atol,
            h0: None,
            max_steps: default_max_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverConfig::Euler { steps } | SolverConfig::Rk4 { steps } => {
                if steps == 0 {
                    return Err(Error::config("solver.steps", "must be at least 1"));
                }
            }
            SolverConfig::Dopri5 {
                rtol,
                atol,
                h0,
                max_steps,
            } => {
                if !(rtol > 0.0 && atol > 0.0) {
                    return Err(Error::config("solver.rtol/atol", "tolerances must be positive"));
                }
                if matches!(h0, Some(h) if !(h > 0.0)) {
                    return Err(Error::config("solver.h0", "initial step must be positive"));
                }
                if max_steps == 0 {
                    return Err(Error::config("solver.max_steps", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl SolverStats {
    pub fn steps(&self) -> usize {
        self.accepted + self.rejected
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OdeSolution {
    pub state: Var,
    pub stats: SolverStats,
}

/// Integrates `dx/ds = rhs(s, x)` from `s0` to `s1`.
fn integrate(
    g: &mut Tape,
    rhs: &mut dyn FnMut(&mut Tape, f64, Var) -> Var,
    x0: Var,
    s0: f64,
    s1: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    cfg.validate()?;
    if !(s0.is_finite() && s1.is_finite()) {
        return Err(Error::NonFinite("ode time"));
    }
    if s1 < s0 {
        return Err(Error::Invalid(format!("integration interval [{s0}, {s1}] is reversed")));
    }
    let mut stats = SolverStats::default();
    let base = g.len();
    let mut eval = |g: &mut Tape, s: f64, x: Var, stats: &mut SolverStats| {
        stats.evaluations += 1;
        rhs(g, s, x)
    };
    match *cfg {
        SolverConfig::Euler { steps } => {
            let h = (s1 - s0) / steps as f64;
            let mut x = x0;
            for k in 0..steps {
                let s = s0 + k as f64 * h;
                let f = eval(g, s, x, &mut stats);
                let dx = g.scale(f, h);
                x = g.add(x, dx);
                x = compact(g, x, base);
                stats.accepted += 1;
            }
            Ok(OdeSolution { state: x, stats })
        }
        SolverConfig::Rk4 { steps } => {
            let h = (s1 - s0) / steps as f64;
            let mut x = x0;
            for k in 0..steps {
                let s = s0 + k as f64 * h;
                let k1 = eval(g, s, x, &mut stats);
                let x2 = axpy(g, x, h / 2.0, k1);
                let k2 = eval(g, s + h / 2.0, x2, &mut stats);
                let x3 = axpy(g, x, h / 2.0, k2);
                let k3 = eval(g, s + h / 2.0, x3, &mut stats);
                let x4 = axpy(g, x, h, k3);
                let k4 = eval(g, s + h, x4, &mut stats);
                let k23 = g.add(k2, k3);
                let k14 = g.add(k1, k4);
                let sum = axpy(g, k14, 2.0, k23);
                x = axpy(g, x, h / 6.0, sum);
                x = compact(g, x, base);
                stats.accepted += 1;
            }
            Ok(OdeSolution { state: x, stats })
        }
        SolverConfig::Dopri5 {
            rtol,
            atol,
            h0,
            max_steps,
        } => dopri5(g, &mut eval, x0, s0, s1, rtol, atol, h0, max_steps, &mut stats)
            .map(|state| OdeSolution { state, stats }),
    }
}

fn axpy(g: &mut Tape, x: Var, k: f64, y: Var) -> Var {
    let ky = g.scale(y, k);
    g.add(x, ky)
}

/// Outside of training, drops everything recorded since `base` and keeps
/// only the current state, so the tape does not grow with the step count.
fn compact(g: &mut Tape, x: Var, base: usize) -> Var {
    if g.grad_enabled() {
        x
    } else {
        let v = g.value(x).clone();
        g.truncate(base);
        g.constant(v)
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Scaled RMS norm over every entry of the batch.
fn rms(err: &[f64], x: &[f64], y: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(x.iter().zip(y))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / err.len().max(1) as f64).sqrt()
}

/// Linear combination `x + h Σ w_j k_j`, skipping zero weights.
fn combine(g: &mut Tape, x: Var, h: f64, weights: &[f64], ks: &[Var]) -> Var {
    let mut acc = x;
    for (&w, &k) in weights.iter().zip(ks) {
        if w != 0.0 {
            acc = axpy(g, acc, h * w, k);
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn dopri5(
    g: &mut Tape,
    eval: &mut dyn FnMut(&mut Tape, f64, Var, &mut SolverStats) -> Var,
    x0: Var,
    s0: f64,
    s1: f64,
    rtol: f64,
    atol: f64,
    h0: Option<f64>,
    max_steps: usize,
    stats: &mut SolverStats,
) -> Result<Var> {
    let span = s1 - s0;
    if span == 0.0 {
        return Ok(x0);
    }
    let grad = g.grad_enabled();
    let base = g.len();
    let mut x = x0;
    let mut k1 = eval(g, s0, x, stats);
    let mut h = match h0 {
        Some(h) => h,
        None => initial_step(g, eval, s0, x, k1, rtol, atol, stats),
    }
    .min(span);
    let mut s = s0;
    while s < s1 {
        if stats.steps() >= max_steps {
            return Err(Error::StepLimit {
                t0: s0,
                t1: s1,
                reached: s,
                max_steps,
            });
        }
        // Land exactly on the end point.
        let last = s + h >= s1 || s1 - (s + h) < 1e-12 * span;
        if last {
            h = s1 - s;
        }
        let mark = g.len();
        let mut ks = vec![k1];
        for stage in 1..7 {
            let xi = combine(g, x, h, &A[stage][..stage], &ks);
            ks.push(eval(g, s + C[stage] * h, xi, stats));
        }
        // The last row of A holds the fifth-order weights.
        let y = combine(g, x, h, &A[6][..6], &ks);
        let err_var = combine(g, x, h, &E, &ks);
        let err: Vec<f64> = g
            .value(err_var)
            .data()
            .iter()
            .zip(g.value(x).data())
            .map(|(a, b)| a - b)
            .collect();
        let norm = rms(&err, g.value(x).data(), g.value(y).data(), rtol, atol);
        if !norm.is_finite() {
            return Err(Error::NonFinite("dopri5 error estimate"));
        }
        let factor = if norm == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if norm <= 1.0 {
            stats.accepted += 1;
            s = if last { s1 } else { s + h };
            x = y;
            k1 = ks[6];
            if !grad {
                let (xv, kv) = (g.value(x).clone(), g.value(k1).clone());
                g.truncate(base);
                x = g.constant(xv);
                k1 = g.constant(kv);
            }
            h *= factor;
        } else {
            stats.rejected += 1;
            g.truncate(mark);
            h *= factor.min(1.0);
        }
        if h < 1e-14 * span.max(1.0) && s < s1 {
            return Err(Error::StepLimit {
                t0: s0,
                t1: s1,
                reached: s,
                max_steps,
            });
        }
    }
    Ok(x)
}

/// Starting step from the usual two-evaluation heuristic.
#[allow(clippy::too_many_arguments)]
fn initial_step(
    g: &mut Tape,
    eval: &mut dyn FnMut(&mut Tape, f64, Var, &mut SolverStats) -> Var,
    s0: f64,
    x0: Var,
    f0: Var,
    rtol: f64,
    atol: f64,
    stats: &mut SolverStats,
) -> f64 {
    let x = g.value(x0).data().to_vec();
    let f = g.value(f0).data().to_vec();
    let d0 = rms(&x, &x, &x, rtol, atol);
    let d1 = rms(&f, &x, &x, rtol, atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let mark = g.len();
    let x1 = axpy(g, x0, h0, f0);
    let f1 = eval(g, s0 + h0, x1, stats);
    let df: Vec<f64> = g
        .value(f1)
        .data()
        .iter()
        .zip(&f)
        .map(|(a, b)| (a - b) / h0)
        .collect();
    let d2 = rms(&df, &x, &x, rtol, atol);
    g.truncate(mark);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

/// Integrates `ẋ = f(t, x)` from `t0` to `t1` for every row of `x0`.
pub fn ode_solve(
    g: &mut Tape,
    f: &dyn Dynamics,
    x0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    let n = g.shape(x0).0;
    let mut rhs = |g: &mut Tape, s: f64, x: Var| {
        let t = g.constant(Tensor::full(n, 1, s));
        f.eval(g, t, x)
    };
    integrate(g, &mut rhs, x0, t0, t1, cfg)
}

/// Solves every row to its own end time in one call.
///
/// Row `i` follows `dx/ds = t_i f(s t_i, x)` on `s ∈ [0, 1]`, which reaches
/// `x(t_i)` at `s = 1`.
pub fn batched_solve(
    g: &mut Tape,
    f: &dyn Dynamics,
    x0: Var,
    t1: &[f64],
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    if t1.len() != g.shape(x0).0 {
        return Err(Error::shape(
            "batched_solve",
            format!("{} end times for {} states", t1.len(), g.shape(x0).0),
        ));
    }
    if let Some(bad) = t1.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::Invalid(format!("end time {bad} must be finite and non-negative")));
    }
    let ends = Tensor::column(t1);
    let mut rhs = |g: &mut Tape, s: f64, x: Var| {
        let tcol = g.constant(ends.clone());
        let t = g.constant(ends.scale(s));
        let out = f.eval(g, t, x);
        g.mul_col(out, tcol)
    };
    integrate(g, &mut rhs, x0, 0.0, 1.0, cfg)
}

/// Convenience wrapper returning the end states as a tensor.
pub fn solve_values(
    ps: &ParamSet,
    f: &dyn Dynamics,
    x0: &Tensor,
    t1: &[f64],
    cfg: &SolverConfig,
) -> Result<(Tensor, SolverStats)> {
    if x0.cols() != f.dim() {
        return Err(Error::shape(
            "ode_solve",
            format!("state width {} but the field has dimension {}", x0.cols(), f.dim()),
        ));
    }
    let mut g = Tape::no_grad(ps);
    let x = g.constant(x0.clone());
    let sol = batched_solve(&mut g, f, x, t1, cfg)?;
    Ok((g.value(sol.state).clone(), sol.stats))
}

/// Closed-form solution of `ẋ = −1000x + 3000 − 2000e^{−t}`, `x(0) = 0`.
pub fn stiff_reference(t: f64) -> f64 {
    // Over a common denominator so that x(0) is exactly zero.
    (2997.0 - 2000.0 * (-t).exp() - 997.0 * (-1000.0 * t).exp()) / 999.0
}

/// The stiff right-hand side as [`Dynamics`].
pub fn stiff_field() -> FnField<impl Fn(&mut Tape, Var, Var) -> Var> {
    FnField {
        dim: 1,
        f: |g: &mut Tape, t: Var, x: Var| {
            let decay = g.scale(x, -1000.0);
            let neg_t = g.neg(t);
            let e = g.exp(neg_t);
            let forcing = g.scale(e, -2000.0);
            let forcing = g.add_scalar(forcing, 3000.0);
            g.add(decay, forcing)
        },
    }
}
