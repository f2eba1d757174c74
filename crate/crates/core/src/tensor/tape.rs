use super::{matmul_nt, matmul_raw, matmul_tn, sigmoid, softmax_columns, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// bias `r x 1` repeated across every column of the left operand
    AddBias(usize, usize),
    Mul(usize, usize),
    Sub(usize, usize),
    MulConst(usize, Tensor2),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxCols(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    Column(usize, usize),
    /// argmax column per row
    MaxPoolRows(usize, Vec<usize>),
    Transpose(usize),
    /// activated gates `[i; f; g; o]` and `tanh(c)` are saved for backward
    LstmCell {
        pre: usize,
        c_prev: Option<usize>,
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    KlDiv(usize, Vec<f64>),
    /// logits, normalized labels, softmax of the logits
    SoftmaxKl(usize, Vec<f64>, Vec<f64>),
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Records every operation in evaluation order. Nodes only ever refer to
/// earlier nodes, so a reverse sweep is a valid backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Parameters and constants both enter as leaves.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(self.shape_err("matmul", a, b));
        }
        let v = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        Ok(Tensor2::from_raw(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    /// `x + bias (x) e`: adds the column vector `bias` to every column.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (r, 1) {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, bi) in b.iter().enumerate() {
            for j in 0..c {
                v.set(i, j, v.get(i, j) + bi);
            }
        }
        Ok(self.push(v, Op::AddBias(x.0, bias.0)))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor2) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x),
                rhs: c.shape(),
            });
        }
        let v = Tensor2::from_raw(
            c.rows(),
            c.cols(),
            self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect(),
        );
        Ok(self.push(v, Op::MulConst(x.0, c)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn softmax_columns(&mut self, x: Var) -> Var {
        let v = softmax_columns(self.value(x));
        self.push(v, Op::SoftmaxCols(x.0))
    }

    /// Stacks vertically; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows of nothing".into()));
        };
        let cols = self.shape(first).1;
        if let Some(&bad) = parts.iter().find(|p| self.shape(**p).1 != cols) {
            return Err(self.shape_err("concat_rows", first, bad));
        }
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let v = Tensor2::from_raw(rows, cols, data);
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Places side by side; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols of nothing".into()));
        };
        let rows = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(self.shape_err("concat_cols", first, bad));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let part = self.value(*p);
            for r in 0..rows {
                for c in 0..part.cols() {
                    v.set(r, offset + c, part.get(r, c));
                }
            }
            offset += part.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} of {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor2::from_raw(len, cols, data), Op::SliceRows(x.0, start)))
    }

    pub fn column(&mut self, x: Var, c: usize) -> Result<Var> {
        let (_, cols) = self.shape(x);
        if c >= cols {
            return Err(Error::invalid(format!("column {c} of {cols}")));
        }
        let v = Tensor2::column(self.value(x).col(c));
        Ok(self.push(v, Op::Column(x.0, c)))
    }

    /// Row-wise max over columns; the gradient goes to the first maximum.
    pub fn maxpool_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols == 0 {
            return Err(Error::Empty("max-pooling over zero columns".into()));
        }
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut best = 0;
            for c in 1..cols {
                if xv.get(r, c) > xv.get(r, best) {
                    best = c;
                }
            }
            arg.push(best);
            out.push(xv.get(r, best));
        }
        Ok(self.push(Tensor2::column(out), Op::MaxPoolRows(x.0, arg)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x.0))
    }

    /// One LSTM step from the gate pre-activations `[i; f; g; o]` (`4h x 1`).
    /// Returns `[h; c]` as a `2h x 1` node.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Option<Var>) -> Result<Var> {
        let (rows, cols) = self.shape(pre);
        if cols != 1 || rows % 4 != 0 {
            return Err(Error::invalid(format!(
                "lstm pre-activation must be 4h x 1, got {rows} x {cols}"
            )));
        }
        let h = rows / 4;
        if let Some(c) = c_prev {
            if self.shape(c) != (h, 1) {
                return Err(self.shape_err("lstm_cell", pre, c));
            }
        }
        let p = self.value(pre).data();
        let mut gates = Vec::with_capacity(rows);
        gates.extend(p[..2 * h].iter().map(|&x| sigmoid(x)));
        gates.extend(p[2 * h..3 * h].iter().map(|&x| x.tanh()));
        gates.extend(p[3 * h..].iter().map(|&x| sigmoid(x)));
        let cp = c_prev.map(|c| self.value(c).data().to_vec());
        let mut out = vec![0.0; 2 * h];
        let mut tanh_c = vec![0.0; h];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let c = i * g + cp.as_ref().map_or(0.0, |cp| f * cp[j]);
            tanh_c[j] = c.tanh();
            out[j] = o * tanh_c[j];
            out[h + j] = c;
        }
        Ok(self.push(
            Tensor2::column(out),
            Op::LstmCell {
                pre: pre.0,
                c_prev: c_prev.map(|c| c.0),
                gates,
                tanh_c,
            },
        ))
    }

    /// `sum_k y_k (ln y_k - ln o_k)` with `y = labels / sum(labels)`; terms
    /// with `y_k = 0` contribute nothing.
    pub fn kl_div(&mut self, o: Var, labels: &[f64]) -> Result<Var> {
        let ov = self.value(o);
        if ov.len() != labels.len() {
            return Err(Error::Shape {
                op: "kl_div",
                lhs: ov.shape(),
                rhs: (labels.len(), 1),
            });
        }
        let y = normalize_labels(labels)?;
        let loss = kl_value(ov.data(), &y);
        Ok(self.push(Tensor2::from_raw(1, 1, vec![loss]), Op::KlDiv(o.0, y)))
    }

    /// `KL(y || softmax(z))` for a logit column `z`, computed through
    /// log-softmax so that small losses keep their precision.
    pub fn softmax_kl(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(logits);
        if zv.cols() != 1 || zv.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_kl",
                lhs: zv.shape(),
                rhs: (labels.len(), 1),
            });
        }
        let y = normalize_labels(labels)?;
        let z = zv.data();
        let (jmax, m) =
            z.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (j, v)| if v > best.1 { (j, v) } else { best },
            );
        let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let tail: f64 = exps
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != jmax)
            .map(|(_, e)| e)
            .sum();
        let log_norm = tail.ln_1p();
        let loss = z
            .iter()
            .zip(&y)
            .filter(|(_, &yk)| yk > 0.0)
            .map(|(&zk, &yk)| yk * (yk.ln() + (m - zk) + log_norm))
            .sum();
        let o = exps.iter().map(|e| e / (1.0 + tail)).collect();
        Ok(self.push(Tensor2::from_raw(1, 1, vec![loss]), Op::SoftmaxKl(logits.0, y, o)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::from_raw(1, 1, vec![s]), Op::Sum(x.0))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_nt(g, val(*b)));
                accumulate(grads, *b, matmul_tn(val(*a), g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip(g, val(*a), |x, y| x * y));
            }
            Op::MulConst(a, c) => accumulate(grads, *a, zip(g, c, |x, y| x * y)),
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.clone());
                let sums = (0..g.rows())
                    .map(|r| (0..g.cols()).map(|c| g.get(r, c)).sum())
                    .collect();
                accumulate(grads, *b, Tensor2::column(sums));
            }
            Op::Relu(x) => accumulate(grads, *x, zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Tanh(x) => accumulate(grads, *x, zip(g, &node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(x) => accumulate(grads, *x, zip(g, &node.value, |gv, y| gv * y * (1.0 - y))),
            Op::SoftmaxCols(x) => {
                let y = &node.value;
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for c in 0..y.cols() {
                    let dot: f64 = (0..y.rows()).map(|r| g.get(r, c) * y.get(r, c)).sum();
                    for r in 0..y.rows() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Tensor2::from_raw(rows, cols, data));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut part = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            part.set(r, c, g.get(r, offset + c));
                        }
                    }
                    accumulate(grads, p, part);
                    offset += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = val(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::Column(x, c) => {
                let (rows, cols) = val(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    dx.set(r, *c, g.get(r, 0));
                }
                accumulate(grads, *x, dx);
            }
            Op::MaxPoolRows(x, arg) => {
                let (rows, cols) = val(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for (r, &c) in arg.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::LstmCell {
                pre,
                c_prev,
                gates,
                tanh_c,
            } => {
                let h = tanh_c.len();
                let gd = g.data();
                let cp = c_prev.map(|c| val(c).data());
                let mut dpre = vec![0.0; 4 * h];
                let mut dcp = vec![0.0; h];
                for j in 0..h {
                    let (i, f, gg, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let (dh, dc_out) = (gd[j], gd[h + j]);
                    let tc = tanh_c[j];
                    let dc = dc_out + dh * o * (1.0 - tc * tc);
                    let d_o = dh * tc;
                    let c_before = cp.map_or(0.0, |cp| cp[j]);
                    dpre[j] = dc * gg * i * (1.0 - i);
                    dpre[h + j] = dc * c_before * f * (1.0 - f);
                    dpre[2 * h + j] = dc * i * (1.0 - gg * gg);
                    dpre[3 * h + j] = d_o * o * (1.0 - o);
                    dcp[j] = dc * f;
                }
                accumulate(grads, *pre, Tensor2::column(dpre));
                if let Some(c) = c_prev {
                    accumulate(grads, *c, Tensor2::column(dcp));
                }
            }
            Op::KlDiv(o, y) => {
                let ov = val(*o);
                let scale = g.get(0, 0);
                let d = ov
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&ok, &yk)| if yk > 0.0 { -scale * yk / ok } else { 0.0 })
                    .collect();
                accumulate(grads, *o, Tensor2::from_raw(ov.rows(), ov.cols(), d));
            }
            Op::SoftmaxKl(z, y, o) => {
                let scale = g.get(0, 0);
                let d = o.iter().zip(y).map(|(ok, yk)| scale * (ok - yk)).collect();
                accumulate(grads, *z, Tensor2::from_raw(o.len(), 1, d));
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                accumulate(grads, *x, Tensor2::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

fn zip(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    Tensor2::from_raw(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn normalize_labels(labels: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = labels.iter().sum();
    if labels.iter().any(|&y| y < 0.0 || !y.is_finite()) {
        return Err(Error::invalid("labels must be nonnegative"));
    }
    if total <= 0.0 {
        return Err(Error::invalid("labels contain no positive entry"));
    }
    Ok(labels.iter().map(|y| y / total).collect())
}

pub(crate) fn kl_value(o: &[f64], y: &[f64]) -> f64 {
    o.iter()
        .zip(y)
        .filter(|(_, &yk)| yk > 0.0)
        .map(|(&ok, &yk)| yk * (yk.ln() - ok.ln()))
        .sum()
}

/// Gradients from one [`Tape::backward`] sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient for `v`, or zeros of `v`'s shape when the loss does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor2 {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Tensor2::zeros(r, c)
        })
    }
}
