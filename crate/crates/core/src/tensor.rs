//! Dense 2-D tensors and a define-by-run reverse-mode tape.
//!
//! Every value on the tape is a row-major matrix. Operations append a node
//! holding the forward value and whatever the backward pass needs; `backward`
//! walks the nodes in exact reverse order and adds each leaf's gradient into
//! its persistent `grad` buffer, so repeated calls accumulate.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Strided view of a matrix for the gemm kernel.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn normal(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// c[m,n] = alpha * a[m,k] * b[k,n] + beta * c
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views cover the index ranges implied by (m, k, n) and their
    // strides; `c` is a dense m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row (across columns).
    Rows,
    /// Normalize each column (across rows).
    Cols,
}

/// Numerically guarded softmax of a plain tensor.
pub fn softmax(x: &Tensor, axis: Axis) -> Tensor {
    let mut out = x.clone();
    let (groups, len, stride, step) = softmax_layout(x, axis);
    for g in 0..groups {
        let base = g * step;
        softmax_group(&x.data, &mut out.data, base, len, stride, None);
    }
    out
}

fn softmax_layout(x: &Tensor, axis: Axis) -> (usize, usize, usize, usize) {
    match axis {
        // groups, group length, element stride, group step
        Axis::Rows => (x.rows, x.cols, 1, x.cols),
        Axis::Cols => (x.cols, x.rows, x.cols, 1),
    }
}

fn softmax_group(
    src: &[f64],
    dst: &mut [f64],
    base: usize,
    len: usize,
    stride: usize,
    keep: Option<&[bool]>,
) {
    let allowed = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        if allowed(i) {
            max = max.max(src[base + i * stride]);
        }
    }
    if max == f64::NEG_INFINITY {
        // nothing to attend to
        for i in 0..len {
            dst[base + i * stride] = 0.0;
        }
        return;
    }
    let mut sum = 0.0;
    for i in 0..len {
        let idx = base + i * stride;
        let e = if allowed(i) { (src[idx] - max).exp() } else { 0.0 };
        dst[idx] = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for i in 0..len {
        dst[base + i * stride] *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: f64,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: Axis,
    },
    MaskedSoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    L1Loss {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; its gradient is kept after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// `a * b` (or `a * b^T` when `trans_b`), scaled by `alpha`.
    pub fn matmul_scaled(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} by {}{br}x{bc}",
                if trans_b { "transposed " } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = View::normal(&self.nodes[a.0].value.data, k);
            let bdata = &self.nodes[b.0].value.data;
            let bv = if trans_b {
                View::transposed(bdata, bc)
            } else {
                View::normal(bdata, bc)
            };
            gemm(m, k, n, alpha, av, bv, 0.0, &mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data: out,
            },
            Op::MatMul {
                a,
                b,
                trans_b,
                alpha,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_scaled(a, b, false, 1.0)
    }

    /// `x * w + bias` with `bias` a 1 x n row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let [r, c] = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Add(a, b), rg))
    }

    /// Broadcast-add a 1 x n row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(bias) != [1, c] {
            return Err(Error::Shape(format!(
                "row bias {:?} for {r}x{c}",
                self.shape(bias)
            )));
        }
        let mut data = self.nodes[x.0].value.data.clone();
        let b = &self.nodes[bias.0].value.data;
        for row in data.chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let value = softmax(&self.nodes[x.0].value, axis);
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x, axis }, rg)
    }

    /// Row softmax where columns with `keep[j] == false` get exactly zero
    /// weight (an additive -inf before normalization).
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let [r, c] = self.shape(x);
        if keep.len() != c {
            return Err(Error::Shape(format!("key mask of {} for {c} columns", keep.len())));
        }
        let src = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(r, c);
        for row in 0..r {
            softmax_group(&src.data, &mut out.data, row * c, c, 1, Some(keep));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmaxRows { x }, rg))
    }

    /// Row-wise layer normalization with affine `gain` and `bias` (1 x n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gain) != [1, c] || self.shape(bias) != [1, c] {
            return Err(Error::Shape(format!("layer norm parameters for width {c}")));
        }
        let src = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let n = c as f64;
        for row in 0..r {
            let xs = &src[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[row] = inv;
            for j in 0..c {
                let h = (xs[j] - mean) * inv;
                xhat[row * c + j] = h;
                out[row * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor {
                rows: r,
                cols: c,
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        value.data.iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        value.data.iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(table);
        let src = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Shape(format!("row {id} of a {r}-row table")));
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                rows: ids.len(),
                cols: c,
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("columns {start}..{} of {c}", start + len)));
        }
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                rows: r,
                cols: len,
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p)[1])
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(Error::Shape("concat_rows with differing column counts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rows = data.len() / cols.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(x);
        let src = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(Error::Shape(format!("row {row} of {r}")));
            }
            data.extend_from_slice(src.row_slice(row));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                rows: rows.len(),
                cols: c,
                data,
            },
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Multiply by a fixed mask (already scaled by 1 / keep probability).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let mut value = self.nodes[x.0].value.clone();
        if mask.len() != value.data.len() {
            return Err(Error::Shape("dropout mask size".into()));
        }
        value.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Mean absolute error between `pred` and fixed targets.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = &self.nodes[pred.0].value.data;
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "{} predictions for {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of the cross-entropy between softmax(logits) and the
    /// target class of each row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if targets.len() != r || r == 0 {
            return Err(Error::Shape(format!("{} targets for {r} rows", targets.len())));
        }
        let probs = softmax(&self.nodes[logits.0].value, Axis::Rows).data;
        let mut loss = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Shape(format!("target class {t} of {c}")));
            }
            let x = self.nodes[logits.0].value.row_slice(row);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - x[t];
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar. Leaf gradients are added to whatever the
    /// leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Shape(format!(
                "backward from a non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let [rows, cols] = node.value.shape();

        // borrow-or-create the gradient buffer of an input
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.data.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let [m, k] = nodes[a.0].value.shape();
                let n = cols;
                let gv = View::normal(g, n);
                if let Some(ga) = slot(grads, nodes, *a) {
                    // dA = alpha * dC * op(B)^T
                    let bdata = &nodes[b.0].value.data;
                    let bv = if *trans_b {
                        View::normal(bdata, k) // B is n x k
                    } else {
                        View::transposed(bdata, n) // B is k x n, view as n x k
                    };
                    gemm(m, n, k, *alpha, gv, bv, 1.0, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    let adata = &nodes[a.0].value.data;
                    if *trans_b {
                        // dB (n x k) = alpha * dC^T * A
                        gemm(
                            n,
                            m,
                            k,
                            *alpha,
                            View::transposed(g, n),
                            View::normal(adata, k),
                            1.0,
                            gb,
                        );
                    } else {
                        // dB (k x n) = alpha * A^T * dC
                        gemm(k, m, n, *alpha, View::transposed(adata, k), gv, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(buf) = slot(grads, nodes, *v) {
                        buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(buf) = slot(grads, nodes, *bias) {
                    for row in g.chunks_exact(cols) {
                        buf.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().zip(g).for_each(|(p, q)| *p += c * q);
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    let y = &node.value;
                    let (groups, len, stride, step) = softmax_layout(y, *axis);
                    for grp in 0..groups {
                        let base = grp * step;
                        let dot: f64 = (0..len)
                            .map(|i| g[base + i * stride] * y.data[base + i * stride])
                            .sum();
                        for i in 0..len {
                            let j = base + i * stride;
                            buf[j] += y.data[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows { x } => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    let y = &node.value.data;
                    for r in 0..rows {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            buf[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gvals = &nodes[gain.0].value.data;
                if let Some(buf) = slot(grads, nodes, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = g[off + j] * gvals[j];
                            sum_d += d;
                            sum_dx += d * xhat[off + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..cols {
                            let d = g[off + j] * gvals[j];
                            buf[off + j] += inv / n * (n * d - sum_d - xhat[off + j] * sum_dx);
                        }
                    }
                }
                if let Some(buf) = slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(buf) = slot(grads, nodes, *bias) {
                    for row in g.chunks_exact(cols) {
                        buf.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    let input = &nodes[x.0].value.data;
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(input[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    let y = &node.value.data;
                    for i in 0..g.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(buf) = slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let src_cols = nodes[x.0].value.cols;
                if let Some(buf) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        let dst = &mut buf[r * src_cols + start..r * src_cols + start + cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols;
                    if let Some(buf) = slot(grads, nodes, *p) {
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            buf[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.data.len();
                    if let Some(buf) = slot(grads, nodes, *p) {
                        buf.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { x, rows: picked } => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    for (r, &src) in picked.iter().enumerate() {
                        buf[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * mask[i];
                    }
                }
            }
            Op::L1Loss { pred, target } => {
                if let Some(buf) = slot(grads, nodes, *pred) {
                    let p = &nodes[pred.0].value.data;
                    let scale = g[0] / p.len() as f64;
                    for i in 0..p.len() {
                        let d = p[i] - target[i];
                        // sign(0) = 0
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[i] += scale * s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(buf) = slot(grads, nodes, *logits) {
                    let c = nodes[logits.0].value.cols;
                    let scale = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += scale * (probs[r * c + j] - indicator);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().for_each(|p| *p += g[0]);
                }
            }
        }
    }
}

/// Multi-head building block: `softmax(q k^T / sqrt(d) + mask) v`.
///
/// `q`, `k` and `v` are L x d. Keys with `key_mask[j] == false` receive zero
/// weight. Returns the output and the attention weights (row i holds the
/// weights query i gives to every key).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let [lq, d] = tape.shape(q);
    let [lk, dk] = tape.shape(k);
    let [lv, _] = tape.shape(v);
    if d != dk || lk != lv {
        return Err(Error::Shape(format!(
            "attention q {lq}x{d}, k {lk}x{dk}, v with {lv} rows"
        )));
    }
    let scores = tape.matmul_scaled(q, k, true, 1.0 / (d as f64).sqrt())?;
    let weights = match key_mask {
        Some(mask) => tape.masked_softmax_rows(scores, mask)?,
        None => tape.softmax(scores, Axis::Rows),
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    /// Central differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.data().len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{i}: {x} vs {y}");
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&t(1, 3, &[0.0, 0.0, 0.0]), Axis::Rows);
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&t(1, 2, &[1000.0, 0.0]), Axis::Rows);
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = softmax(&t(2, 2, &[0.0, 1.0, 0.0, 1.0]), Axis::Cols);
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        // repeated backward accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(t(4, 1, &[1.0, -1.0, 0.3, 2.0]));
        let loss = tape.l1_loss(x, &[0.0, 0.0, 1.0, -1.0]).unwrap();
        assert!((tape.value(loss).item() - (1.0 + 1.0 + 0.7 + 3.0) / 4.0).abs() < 1e-15);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matmul_scaled(a, b, true, 1.0).is_ok());
        assert!(tape.add_row(a, b).is_err());
        let bias = tape.param(Tensor::zeros(1, 2));
        assert!(tape.add(a, bias).is_err());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_gradients_both_layouts() {
        let a0 = t(2, 3, &[0.1, -0.4, 0.7, 1.2, 0.3, -0.9]);
        let b0 = t(3, 2, &[0.5, -0.2, 0.8, 0.1, -0.6, 0.4]);
        let bt0 = t(2, 3, &[0.5, 0.8, -0.6, -0.2, 0.1, 0.4]);
        for trans in [false, true] {
            let bsrc = if trans { bt0.clone() } else { b0.clone() };
            let f = |a: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let av = tape.constant(a.clone());
                let bv = tape.constant(b.clone());
                let c = tape.matmul_scaled(av, bv, trans, 0.7).unwrap();
                let c2 = tape.tanh(c);
                let s = tape.sum(c2);
                tape.value(s).item()
            };
            let mut tape = Tape::new();
            let av = tape.param(a0.clone());
            let bv = tape.param(bsrc.clone());
            let c = tape.matmul_scaled(av, bv, trans, 0.7).unwrap();
            let c2 = tape.tanh(c);
            let s = tape.sum(c2);
            tape.backward(s).unwrap();
            assert_close(tape.grad(av).unwrap(), &numeric_grad(&a0, |a| f(a, &bsrc)), 1e-8);
            assert_close(tape.grad(bv).unwrap(), &numeric_grad(&bsrc, |b| f(&a0, b)), 1e-8);
        }
    }

    #[test]
    fn layer_norm_properties() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 4, &[2.0, 2.0, 2.0, 2.0]));
        let g = tape.constant(Tensor::filled(1, 4, 1.0));
        let b = tape.constant(Tensor::zeros(1, 4));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let x = tape.constant(t(1, 4, &[0.3, -1.0, 4.0, 2.5]));
        let g0 = tape.constant(Tensor::zeros(1, 4));
        let bias = tape.constant(t(1, 4, &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // layer_norm -> gelu -> softmax(cols) -> dropout -> select -> concat -> CE
        let x0 = t(3, 4, &[0.3, -1.0, 4.0, 2.5, 0.1, 0.2, -0.3, 0.9, 1.5, -2.0, 0.0, 0.4]);
        let g0 = t(1, 4, &[1.1, 0.9, -0.5, 1.3]);
        let mask = vec![1.25, 0.0, 1.25, 1.25, 1.25, 1.25, 0.0, 1.25, 1.25, 1.25, 1.25, 1.25];
        let build = |tape: &mut Tape, x: Var, g: Var| -> Var {
            let b = tape.constant(t(1, 4, &[0.0, 0.1, 0.2, -0.1]));
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            let y = tape.gelu(y);
            let y = tape.softmax(y, Axis::Cols);
            let y = tape.dropout_with_mask(y, mask.clone()).unwrap();
            let a = tape.select_rows(y, &[2, 0]).unwrap();
            let s = tape.slice_cols(y, 1, 2).unwrap();
            let s = tape.select_rows(s, &[1, 1]).unwrap();
            let c = tape.concat_cols(&[a, s]).unwrap();
            let c = tape.scale(c, 3.0);
            tape.cross_entropy(c, &[1, 4]).unwrap()
        };
        let eval = |x: &Tensor, g: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let gv = tape.constant(g.clone());
            let l = build(&mut tape, xv, gv);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let gv = tape.param(g0.clone());
        let loss = build(&mut tape, xv, gv);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(xv).unwrap(), &numeric_grad(&x0, |x| eval(x, &g0)), 1e-7);
        assert_close(tape.grad(gv).unwrap(), &numeric_grad(&g0, |g| eval(&x0, g)), 1e-7);
    }

    #[test]
    fn gather_concat_rows_and_masked_softmax_gradients() {
        let table0 = t(4, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        let ids = [3usize, 0, 3, 1];
        let keep = [true, false, true, true];
        let run = |tape: &mut Tape, table: Var| -> Var {
            let e = tape.gather(table, &ids).unwrap();
            let s = tape.matmul_scaled(e, e, true, 1.0).unwrap();
            let w = tape.masked_softmax_rows(s, &keep).unwrap();
            let o = tape.matmul(w, e).unwrap();
            let first = tape.select_rows(o, &[0]).unwrap();
            let last = tape.select_rows(o, &[3]).unwrap();
            let both = tape.concat_rows(&[first, last]).unwrap();
            let both = tape.tanh(both);
            tape.sum(both)
        };
        let eval = |tb: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(tb.clone());
            let l = run(&mut tape, v);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let table = tape.param(table0.clone());
        let loss = run(&mut tape, table);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(table).unwrap(), &numeric_grad(&table0, eval), 1e-7);
    }

    #[test]
    fn attention_symmetric_case() {
        let mut tape = Tape::new();
        let q = tape.constant(t(2, 1, &[1.0, 1.0]));
        let (out, w) = scaled_dot_attention(&mut tape, q, q, q, None).unwrap();
        assert_eq!(tape.value(w).data(), &[0.5; 4]);
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let q = tape.constant(t(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let (_, w) = scaled_dot_attention(&mut tape, q, q, q, Some(&[true, true, false])).unwrap();
        let w = tape.value(w);
        for r in 0..3 {
            assert_eq!(w.get(r, 2), 0.0);
            assert!((w.get(r, 0) + w.get(r, 1) - 1.0).abs() < 1e-15);
        }
    }
}
