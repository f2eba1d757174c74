//! Dense 2-D tensors and a small reverse-mode differentiation tape.
//!
//! Everything is `f64`. Matrices are row-major and column vectors are
//! `n x 1`, so a sequence of `T` embeddings of width `d` is a `d x T` matrix,
//! one column per token.

mod adam;
mod gradcheck;
mod lstm;
pub(crate) mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{bilstm_forward, BiLstmParams, BiLstmVars, LstmParams, LstmVars};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// Rejects a wrong data length and any NaN or infinity.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor2::from_raw(n, 1, values)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Tensor2::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor2::from_raw(rows, cols, data)
    }

    /// Xavier/Glorot uniform initialization for a `rows x cols` weight.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor2::uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(matmul_raw(a, b))
}

pub(crate) fn matmul_raw(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor2::from_raw(n, m, out)
}

/// `a * b^T`
pub(crate) fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor2::from_raw(n, m, out)
}

/// `a^T * b`
pub(crate) fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor2::from_raw(n, m, out)
}

/// Softmax down each column, with the column max subtracted first.
pub fn softmax_columns(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for c in 0..x.cols {
        let max = (0..x.rows).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in 0..x.rows {
            let e = (x.get(r, c) - max).exp();
            out.set(r, c, e);
            z += e;
        }
        for r in 0..x.rows {
            out.set(r, c, out.get(r, c) / z);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Mul,
    Sub,
    Relu,
    Tanh,
}

pub fn elementwise(op: ElemOp, a: &Tensor2, b: Option<&Tensor2>) -> Result<Tensor2> {
    match (op, b) {
        (ElemOp::Mul | ElemOp::Sub, Some(b)) => {
            same_shape("elementwise", a, b)?;
            let f = if op == ElemOp::Mul {
                |x: f64, y: f64| x * y
            } else {
                |x: f64, y: f64| x - y
            };
            Ok(Tensor2::from_raw(
                a.rows,
                a.cols,
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            ))
        }
        (ElemOp::Mul | ElemOp::Sub, None) => Err(Error::invalid("binary elementwise op needs two operands")),
        (ElemOp::Relu, _) => Ok(a.map(|x| x.max(0.0))),
        (ElemOp::Tanh, _) => Ok(a.map(f64::tanh)),
    }
}

/// Per-row maximum over columns.
pub fn maxpool_rows(x: &Tensor2) -> Result<Vec<f64>> {
    if x.cols == 0 {
        return Err(Error::Empty("max-pooling over zero columns".into()));
    }
    Ok((0..x.rows)
        .map(|r| (0..x.cols).map(|c| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
