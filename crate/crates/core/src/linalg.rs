//! Dense row-major matrices and the handful of GEMM shapes the networks need.
//!
//! Weight matrices are stored `out x in`, activations `batch x features`, so a
//! dense layer is `Y = X W^T + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// `C = beta * C + alpha * op(A) * op(B)` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    a_ld: usize,
    b: &[f64],
    b_trans: bool,
    b_ld: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, a_ld) } else { (a_ld, 1) };
    let (rsb, csb) = if b_trans { (1, b_ld) } else { (b_ld, 1) };
    // SAFETY: the callers below size every buffer to the strides passed here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `X W^T` for `X: B x in`, `W: out x in`.
pub fn matmul_nt(x: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(x.cols, w.cols, "matmul_nt inner dimension");
    let mut out = Matrix::zeros(x.rows, w.rows);
    dgemm(
        x.rows, x.cols, w.rows, 1.0, &x.data, false, x.cols, &w.data, true, w.cols, 0.0,
        &mut out.data,
    );
    out
}

/// `acc += DY^T X` for `DY: B x out`, `X: B x in`, `acc: out x in`.
pub fn add_matmul_tn(acc: &mut Matrix, dy: &Matrix, x: &Matrix) {
    assert_eq!(dy.rows, x.rows, "add_matmul_tn batch dimension");
    assert_eq!((acc.rows, acc.cols), (dy.cols, x.cols));
    dgemm(
        dy.cols, dy.rows, x.cols, 1.0, &dy.data, true, dy.cols, &x.data, false, x.cols, 1.0,
        &mut acc.data,
    );
}

/// `DY W` for `DY: B x out`, `W: out x in`.
pub fn matmul_nn(dy: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(dy.cols, w.rows, "matmul_nn inner dimension");
    let mut out = Matrix::zeros(dy.rows, w.cols);
    dgemm(
        dy.rows, dy.cols, w.cols, 1.0, &dy.data, false, dy.cols, &w.data, false, w.cols, 0.0,
        &mut out.data,
    );
    out
}

/// Adds a `1 x n` bias row to every row of `m`.
pub fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    debug_assert_eq!(bias.len(), m.cols);
    for i in 0..m.rows {
        for (v, b) in m.row_mut(i).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

/// Accumulates column sums of `dy` into a `1 x n` bias gradient.
pub fn add_col_sums(acc: &mut Matrix, dy: &Matrix) {
    debug_assert_eq!(acc.len(), dy.cols);
    for i in 0..dy.rows {
        for (a, d) in acc.data.iter_mut().zip(dy.row(i)) {
            *a += d;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Backward pass of `y = v / |v|`: returns `dL/dv` given `dL/dy`.
pub fn normalize_backward(y: &[f64], v_norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, di)| (di - yi * proj) / v_norm)
        .collect()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
