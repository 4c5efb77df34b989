//! Linear flows `F(t, x) = exp(A t) x` and the matrix exponential.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Largest 1-norm handled by the Taylor series before squaring.
const SQUARING_THRESHOLD: f64 = 0.5;
const TAYLOR_DEGREE: usize = 13;

fn squarings(norm1: f64) -> u32 {
    if norm1 <= SQUARING_THRESHOLD {
        0
    } else {
        (norm1 / SQUARING_THRESHOLD).log2().ceil() as u32
    }
}

/// `exp(A)` by scaling and squaring with a degree-13 Taylor series.
pub fn matrix_exp(a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() {
        return Err(Error::shape("matrix_exp", format!("{:?} is not square", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("matrix_exp"));
    }
    let s = squarings(a.norm1());
    let x = a.scale(0.5f64.powi(s as i32));
    let n = a.rows();
    let eye = Tensor::identity(n);
    // Horner: I + X(I + X/2(I + X/3(...)))
    let mut p = eye.clone();
    for k in (1..=TAYLOR_DEGREE).rev() {
        p = x.matmul(&p).scale(1.0 / k as f64);
        p.add_assign(&eye);
    }
    for _ in 0..s {
        p = p.matmul(&p);
    }
    Ok(p)
}

/// Differentiable `exp(A)`; the number of squarings is picked from the
/// current value and treated as a constant.
pub fn matrix_exp_tape(g: &mut Tape, a: Var) -> Var {
    let (n, m) = g.shape(a);
    assert_eq!(n, m, "matrix_exp_tape: {n}×{m} is not square");
    let s = squarings(g.value(a).norm1());
    let x = g.scale(a, 0.5f64.powi(s as i32));
    let eye = g.constant(Tensor::identity(n));
    let mut p = eye;
    for k in (1..=TAYLOR_DEGREE).rev() {
        let xp = g.matmul(x, p);
        let xp = g.scale(xp, 1.0 / k as f64);
        p = g.add(xp, eye);
    }
    for _ in 0..s {
        p = g.matmul(p, p);
    }
    p
}

/// `F(t, x) = exp(A t) x` with a trainable `d × d` matrix `A`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearFlow {
    pub dim: usize,
    pub a: ParamId,
}

impl LinearFlow {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("linear flow needs a positive dimension".into()));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let a: Vec<f64> = (0..dim * dim).map(|_| normal.sample(rng)).collect();
        let a = ps.add(format!("{name}.a"), Tensor::raw(dim, dim, a));
        Ok(Self { dim, a })
    }

    /// Fixed `A`, mainly for tests and analytic baselines.
    pub fn with_matrix(ps: &mut ParamSet, name: &str, a: Tensor) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::shape("linear_flow", format!("{:?} is not square", a.shape())));
        }
        let dim = a.rows();
        let a = ps.add(format!("{name}.a"), a);
        Ok(Self { dim, a })
    }

    /// Applies `exp(A · sign · t_i)` to row `i` of `x`. Rows that share a
    /// time share one exponential.
    fn apply(&self, g: &mut Tape, t: Var, x: Var, sign: f64) -> Var {
        let times = g.value(t).data().to_vec();
        let a = g.param(self.a);
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (i, &ti) in times.iter().enumerate() {
            match groups.iter_mut().find(|(t, _)| t.to_bits() == ti.to_bits()) {
                Some((_, rows)) => rows.push(i),
                None => groups.push((ti, vec![i])),
            }
        }
        let mut blocks = Vec::with_capacity(groups.len());
        let mut order: Vec<usize> = Vec::with_capacity(times.len());
        for (ti, rows) in &groups {
            let at = g.scale(a, sign * ti);
            let e = matrix_exp_tape(g, at);
            let xr = if groups.len() == 1 { x } else { g.select_rows(x, rows) };
            // Row form of E x is x Eᵀ.
            blocks.push(g.linear(xr, e));
            order.extend(rows);
        }
        if groups.len() == 1 {
            return blocks[0];
        }
        let stacked = g.vcat(&blocks);
        let mut inverse = vec![0; order.len()];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        g.select_rows(stacked, &inverse)
    }

    pub fn forward(&self, g: &mut Tape, t: Var, x: Var) -> Var {
        self.apply(g, t, x, 1.0)
    }

    pub fn inverse(&self, g: &mut Tape, t: Var, y: Var) -> Var {
        self.apply(g, t, y, -1.0)
    }

    /// `log|det exp(A t)| = t · tr(A)` per row, `n × 1`.
    pub fn log_det(&self, g: &mut Tape, t: Var) -> Var {
        let a = g.param(self.a);
        let eye = g.constant(Tensor::identity(self.dim));
        let diag = g.mul(a, eye);
        let tr = g.sum(diag);
        g.mul_scalar_var(t, tr)
    }
}
