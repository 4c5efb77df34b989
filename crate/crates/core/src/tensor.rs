//! Dense row-major `f64` arrays.
//!
//! Every tensor in this crate is two-dimensional: vectors are `1 × d` rows,
//! batches are `n × d`, scalars are `1 × 1`. The shape is still stored as a
//! list so that serialized models describe themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting mismatched lengths and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != 2 {
            return Err(Error::shape("tensor", format!("expected 2 dims, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for values produced inside the crate.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::raw(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Self::raw(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Self::raw(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.rows(), self.cols(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        Tensor::raw(
            self.rows(),
            self.cols(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, k: f64, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::raw(c, r, out)
    }

    /// `self · other`, with optional transposition of either operand.
    pub fn matmul_t(&self, ta: bool, other: &Tensor, tb: bool) -> Tensor {
        let (m, k) = if ta {
            (self.cols(), self.rows())
        } else {
            (self.rows(), self.cols())
        };
        let (k2, n) = if tb {
            (other.cols(), other.rows())
        } else {
            (other.rows(), other.cols())
        };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        let (rsa, csa) = if ta {
            (1, self.cols() as isize)
        } else {
            (self.cols() as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, other.cols() as isize)
        } else {
            (other.cols() as isize, 1)
        };
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides and extents describe the owned buffers exactly.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::raw(m, n, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(false, other, false)
    }

    /// Column slice `[start, end)`.
    pub fn cols_range(&self, start: usize, end: usize) -> Tensor {
        let r = self.rows();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&self.row_slice(i)[start..end]);
        }
        Tensor::raw(r, end - start, out)
    }

    /// Gathers columns by index.
    pub fn select_cols(&self, idx: &[usize]) -> Tensor {
        let r = self.rows();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = self.row_slice(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor::raw(r, idx.len(), out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(c * idx.len());
        for &i in idx {
            out.extend_from_slice(self.row_slice(i));
        }
        Tensor::raw(idx.len(), c, out)
    }

    pub fn hcat(parts: &[&Tensor]) -> Tensor {
        let r = parts[0].rows();
        let c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row_slice(i));
            }
        }
        Tensor::raw(r, c, out)
    }

    pub fn vcat(parts: &[&Tensor]) -> Tensor {
        let c = parts[0].cols();
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::raw(data.len() / c.max(1), c, data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).sum()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.cols())
            .map(|j| (0..self.rows()).map(|i| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Determinant by LU with partial pivoting.
    pub fn det(&self) -> f64 {
        let n = self.rows();
        assert_eq!(n, self.cols(), "det of a non-square matrix");
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 {
                return 0.0;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                det = -det;
            }
            let pivot = a[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        det
    }

    /// Solves `self · x = b` for square `self` by Gaussian elimination.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.rows();
        if n != self.cols() || b.rows() != n {
            return Err(Error::shape("solve", "system is not square"));
        }
        let m = b.cols();
        let mut a = self.data.clone();
        let mut x = b.data.clone();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k].abs() < 1e-300 {
                return Err(Error::Invalid("singular matrix".into()));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                for j in 0..m {
                    x.swap(k * m + j, p * m + j);
                }
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                for j in 0..m {
                    x[i * m + j] -= f * x[k * m + j];
                }
            }
        }
        for k in (0..n).rev() {
            for j in 0..m {
                let mut s = x[k * m + j];
                for i in k + 1..n {
                    s -= a[k * n + i] * x[i * m + j];
                }
                x[k * m + j] = s / a[k * n + k];
            }
        }
        Ok(Tensor::raw(n, m, x))
    }
}
