//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! gradients for every parameter that was read through [`Tape::param`].
//!
//! Tape methods panic on shape mismatch; callers validate shapes at their own
//! API boundary. A tape built with [`Tape::no_grad`] still computes values but
//! refuses to differentiate, which is how models are evaluated outside
//! training.

use crate::error::{Error, Result};
use crate::params::{bilinear, spectral_factor, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x · Wᵀ` with `x: n×k`, `W: m×k`.
    Linear(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddCol(Var, Var),
    MulScalarVar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    LogSumExpRows(Var),
    Hcat(Vec<Var>),
    Vcat(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    BroadcastRows(Var),
    SpectralWeight {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        coeff: f64,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Gradients of one scalar output with respect to recorded nodes.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable (zeros are `None`).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, indexed by [`ParamId`].
    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.by_param
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    pub fn no_grad(params: &'p ParamSet) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= len) {
                *slot = None;
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// A leaf the caller may differentiate against via [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A weight with its spectral bound applied, `W · min(1, c/σ̂)` where
    /// σ̂ = uᵀWv uses the persisted power-iteration vectors. The vectors are
    /// treated as constants when differentiating.
    pub fn weight(&mut self, id: ParamId) -> Var {
        let w = self.param(id);
        let Some(link) = self.params.spectral_link(id) else {
            return w;
        };
        let u = self.params.get(link.u).data().to_vec();
        let v = self.params.get(link.v).data().to_vec();
        let sigma = bilinear(&u, self.value(w), &v);
        let value = self.value(w).scale(spectral_factor(sigma, link.coeff));
        let coeff = link.coeff;
        self.push(
            value,
            Op::SpectralWeight {
                w,
                u,
                v,
                coeff,
                sigma,
            },
        )
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "{name}: shape {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    /// `x · Wᵀ`: the affine part of a dense layer with `W` stored out × in.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.cols(), "linear: input width {} vs weight {:?}", xv.cols(), wv.shape());
        let v = xv.matmul_t(false, wv, true);
        self.push(v, Op::Linear(x, w))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `(n×m) + (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows() == 1 && rv.cols() == av.cols(), "add_row shape");
        let m = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += rv.data()[i % m];
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `(n×m) ⊙ (1×m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows() == 1 && rv.cols() == av.cols(), "mul_row shape");
        let m = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= rv.data()[i % m];
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// `(n×m) ⊙ (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(cv.cols() == 1 && cv.rows() == av.rows(), "mul_col shape");
        let m = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= cv.data()[i / m];
        }
        self.push(out, Op::MulCol(a, col))
    }

    /// `(n×m) + (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(cv.cols() == 1 && cv.rows() == av.rows(), "add_col shape");
        let m = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += cv.data()[i / m];
        }
        self.push(out, Op::AddCol(a, col))
    }

    /// Multiplies every entry by a `1×1` variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var expects a scalar");
        let k = self.scalar(s);
        let v = self.value(a).scale(k);
        self.push(v, Op::MulScalarVar(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `n×m → n×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect();
        let t = Tensor::raw(sums.len(), 1, sums);
        self.push(t, Op::RowSums(a))
    }

    /// Sum down rows: `n×m → 1×m`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = vec![0.0; m];
        for (i, x) in av.data().iter().enumerate() {
            out[i % m] += x;
        }
        self.push(Tensor::raw(1, m, out), Op::ColSums(a))
    }

    /// Row-wise log-sum-exp: `n×m → n×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows())
            .map(|i| {
                let row = av.row_slice(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let t = Tensor::raw(out.len(), 1, out);
        self.push(t, Op::LogSumExpRows(a))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let r = tensors[0].rows();
        assert!(tensors.iter().all(|t| t.rows() == r), "hcat: row counts differ");
        let v = Tensor::hcat(&tensors);
        self.push(v, Op::Hcat(parts.to_vec()))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let c = tensors[0].cols();
        assert!(tensors.iter().all(|t| t.cols() == c), "vcat: column counts differ");
        let v = Tensor::vcat(&tensors);
        self.push(v, Op::Vcat(parts.to_vec()))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        self.push(v, Op::SelectCols(a, idx.to_vec()))
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(a, &idx)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        self.push(v, Op::SelectRows(a, idx.to_vec()))
    }

    /// Repeats a `1×m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a single row");
        let parts: Vec<&Tensor> = std::iter::repeat_n(av, n).collect();
        let v = Tensor::vcat(&parts);
        self.push(v, Op::BroadcastRows(a))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::UnknownVar(output.0));
        }
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on a no-grad tape".into()));
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("backward output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accum(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    accum(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    accum(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    let gb = g.zip_map(y, |gi, yi| gi * yi).zip_map(bv, |x, y| -x / y);
                    accum(&mut grads, *b, gb);
                }
                Op::Neg(a) => accum(&mut grads, *a, g.scale(-1.0)),
                Op::Scale(a, k) => accum(&mut grads, *a, g.scale(*k)),
                Op::AddScalar(a) => accum(&mut grads, *a, g),
                Op::Linear(x, w) => {
                    // y = x Wᵀ: dx = g W, dW = gᵀ x
                    accum(&mut grads, *x, g.matmul(val(*w)));
                    accum(&mut grads, *w, g.matmul_t(true, val(*x), false));
                }
                Op::MatMul(a, b) => {
                    accum(&mut grads, *a, g.matmul_t(false, val(*b), true));
                    accum(&mut grads, *b, val(*a).matmul_t(true, &g, false));
                }
                Op::AddRow(a, row) => {
                    let m = g.cols();
                    let mut gr = vec![0.0; m];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % m] += x;
                    }
                    accum(&mut grads, *row, Tensor::raw(1, m, gr));
                    accum(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let m = g.cols();
                    let (av, rv) = (val(*a), val(*row));
                    let mut gr = vec![0.0; m];
                    let mut ga = g.clone();
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        gr[i % m] += *x * av.data()[i];
                        *x *= rv.data()[i % m];
                    }
                    accum(&mut grads, *row, Tensor::raw(1, m, gr));
                    accum(&mut grads, *a, ga);
                }
                Op::MulCol(a, col) => {
                    let m = g.cols();
                    let (av, cv) = (val(*a), val(*col));
                    let mut gc = vec![0.0; g.rows()];
                    let mut ga = g.clone();
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        gc[i / m] += *x * av.data()[i];
                        *x *= cv.data()[i / m];
                    }
                    accum(&mut grads, *col, Tensor::raw(gc.len(), 1, gc));
                    accum(&mut grads, *a, ga);
                }
                Op::AddCol(a, col) => {
                    let m = g.cols();
                    let mut gc = vec![0.0; g.rows()];
                    for (i, x) in g.data().iter().enumerate() {
                        gc[i / m] += x;
                    }
                    accum(&mut grads, *col, Tensor::raw(gc.len(), 1, gc));
                    accum(&mut grads, *a, g);
                }
                Op::MulScalarVar(a, s) => {
                    let k = val(*s).data()[0];
                    let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    accum(&mut grads, *s, Tensor::scalar(gs));
                    accum(&mut grads, *a, g.scale(k));
                }
                Op::Tanh(a) => accum(&mut grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
                Op::Sigmoid(a) => accum(&mut grads, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))),
                Op::Elu(a) => {
                    let d = val(*a).zip_map(y, |xi, yi| if xi > 0.0 { 1.0 } else { yi + 1.0 });
                    accum(&mut grads, *a, g.zip_map(&d, |x, y| x * y));
                }
                Op::Softplus(a) => {
                    accum(&mut grads, *a, g.zip_map(val(*a), |gi, xi| gi * sigmoid(xi)))
                }
                Op::Exp(a) => accum(&mut grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
                Op::Log(a) => accum(&mut grads, *a, g.zip_map(val(*a), |gi, xi| gi / xi)),
                Op::Sin(a) => accum(&mut grads, *a, g.zip_map(val(*a), |gi, xi| gi * xi.cos())),
                Op::Cos(a) => accum(&mut grads, *a, g.zip_map(val(*a), |gi, xi| -gi * xi.sin())),
                Op::Square(a) => {
                    accum(&mut grads, *a, g.zip_map(val(*a), |gi, xi| 2.0 * gi * xi))
                }
                Op::Sum(a) => {
                    let av = val(*a);
                    accum(&mut grads, *a, Tensor::full(av.rows(), av.cols(), g.data()[0]));
                }
                Op::RowSums(a) => {
                    let av = val(*a);
                    let m = av.cols();
                    let data = (0..av.len()).map(|i| g.data()[i / m]).collect();
                    accum(&mut grads, *a, Tensor::raw(av.rows(), m, data));
                }
                Op::ColSums(a) => {
                    let av = val(*a);
                    let m = av.cols();
                    let data = (0..av.len()).map(|i| g.data()[i % m]).collect();
                    accum(&mut grads, *a, Tensor::raw(av.rows(), m, data));
                }
                Op::LogSumExpRows(a) => {
                    let av = val(*a);
                    let m = av.cols();
                    let data = av
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| g.data()[i / m] * (x - y.data()[i / m]).exp())
                        .collect();
                    accum(&mut grads, *a, Tensor::raw(av.rows(), m, data));
                }
                Op::Hcat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        accum(&mut grads, *p, g.cols_range(start, start + w));
                        start += w;
                    }
                }
                Op::Vcat(parts) => {
                    let c = g.cols();
                    let mut start = 0;
                    for p in parts {
                        let r = val(*p).rows();
                        let slice = g.data()[start * c..(start + r) * c].to_vec();
                        accum(&mut grads, *p, Tensor::raw(r, c, slice));
                        start += r;
                    }
                }
                Op::SelectCols(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for (k, &j) in idx.iter().enumerate() {
                            let cur = ga.get(r, j);
                            ga.set(r, j, cur + g.get(r, k));
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let m = av.cols();
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..m {
                            let cur = ga.get(r, j);
                            ga.set(r, j, cur + g.get(k, j));
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let m = g.cols();
                    let mut gr = vec![0.0; m];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % m] += x;
                    }
                    accum(&mut grads, *a, Tensor::raw(1, m, gr));
                }
                Op::SpectralWeight {
                    w,
                    u,
                    v,
                    coeff,
                    sigma,
                } => {
                    let wv = val(*w);
                    if *sigma > *coeff {
                        // out = (c/σ) W with σ = uᵀWv:
                        // dW = (c/σ) G − (c/σ²) ⟨G, W⟩ u vᵀ
                        let k = coeff / sigma;
                        let inner: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                        let corr = coeff * inner / (sigma * sigma);
                        let mut gw = g.scale(k);
                        let cols = wv.cols();
                        for (i, x) in gw.data_mut().iter_mut().enumerate() {
                            *x -= corr * u[i / cols] * v[i % cols];
                        }
                        accum(&mut grads, *w, gw);
                    } else {
                        accum(&mut grads, *w, g);
                    }
                }
            }
        }

        let mut by_param = vec![None; self.params.len()];
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let Op::Param(id) = node.op {
                by_param[id.0] = grad.clone();
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }
}
