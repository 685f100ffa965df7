//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Graph::backward`] walks the tape in reverse and
//! accumulates adjoints. Parameters enter the tape by reference, so building
//! a graph over a large [`ParamStore`] does not copy weights.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::matrix::gemm;
use crate::{Matrix, ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Matrix),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    PickPerRow(Var, Vec<usize>),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    WrapDiff(Var),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
}

/// Per-node adjoints produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

const PAD: usize = usize::MAX;

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xm, rm) = (self.value(x), self.value(row));
        assert_eq!(rm.shape(), (1, xm.cols()), "add_row expects a 1x{} row", xm.cols());
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xm, rm) = (self.value(x), self.value(row));
        assert_eq!(rm.shape(), (1, xm.cols()), "mul_row expects a 1x{} row", xm.cols());
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn add_const(&mut self, x: Var, c: &Matrix) -> Var {
        let out = self.value(x).zip_map(c, |a, b| a + b);
        self.push(out, Op::AddConst(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(out, Op::MulConst(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        self.push(out, Op::Minimum(a, b))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    /// Zero-mean, unit-variance normalisation of each row (no affine part).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::NormalizeRows(x, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xm = self.value(x);
        assert!(start + width <= xm.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(xm.rows(), width, |r, c| xm.get(r, start + c));
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, height: usize) -> Var {
        let xm = self.value(x);
        assert!(start + height <= xm.rows(), "slice_rows out of range");
        let c = xm.cols();
        let out = Matrix::new(height, c, xm.data()[start * c..(start + height) * c].to_vec());
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::new(1, 1, vec![s]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let s = m.sum() / m.len() as f64;
        self.push(Matrix::new(1, 1, vec![s]), Op::Mean(x))
    }

    /// `r×c → r×1`, summing each row.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let out = Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum());
        self.push(out, Op::RowSums(x))
    }

    /// Selects column `idx[r]` from each row `r`, giving an `r×1` column.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let m = self.value(x);
        assert_eq!(idx.len(), m.rows(), "pick_per_row needs one index per row");
        let out = Matrix::from_fn(m.rows(), 1, |r, _| m.get(r, idx[r]));
        self.push(out, Op::PickPerRow(x, idx.to_vec()))
    }

    /// Unfolds a `length × channels` sequence into convolution patches with
    /// zero padding. Row `o` holds inputs `o·stride − padding .. + kernel`,
    /// laid out tap-major (`tap · channels + channel`).
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let xm = self.value(x);
        let (len, ch) = xm.shape();
        let padded = len + 2 * padding;
        assert!(kernel >= 1 && stride >= 1 && padded >= kernel, "invalid im2col geometry");
        let out_len = (padded - kernel) / stride + 1;
        let mut out = Matrix::zeros(out_len, kernel * ch);
        for o in 0..out_len {
            for t in 0..kernel {
                let pos = (o * stride + t) as isize - padding as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let src = xm.row(pos as usize);
                out.row_mut(o)[t * ch..(t + 1) * ch].copy_from_slice(src);
            }
        }
        self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// Max-pooling along the sequence (row) axis, per channel, with
    /// `-inf` padding.
    pub fn max_pool_rows(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let xm = self.value(x);
        let (len, ch) = xm.shape();
        let padded = len + 2 * padding;
        assert!(kernel >= 1 && stride >= 1 && padded >= kernel, "invalid pooling geometry");
        let out_len = (padded - kernel) / stride + 1;
        let mut out = Matrix::zeros(out_len, ch);
        let mut argmax = vec![PAD; out_len * ch];
        for o in 0..out_len {
            for c in 0..ch {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PAD;
                for t in 0..kernel {
                    let pos = (o * stride + t) as isize - padding as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let v = xm.get(pos as usize, c);
                    if best_idx == PAD || v > best {
                        best = v;
                        best_idx = pos as usize * ch + c;
                    }
                }
                out.set(o, c, best);
                argmax[o * ch + c] = best_idx;
            }
        }
        self.push(out, Op::MaxPoolRows { x, argmax })
    }

    /// Signed periodic difference `x − target`, reduced per column to the
    /// candidate of smallest magnitude among `d`, `d + period`, `d − period`.
    /// The derivative with respect to `x` is one wherever the minimum is
    /// unique.
    pub fn wrap_diff(&mut self, x: Var, target: &Matrix, periods: &[f64]) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), target.shape(), "wrap_diff shape mismatch");
        assert_eq!(periods.len(), xm.cols(), "wrap_diff needs one period per column");
        let out = Matrix::from_fn(xm.rows(), xm.cols(), |r, c| {
            wrap_signed(xm.get(r, c) - target.get(r, c), periods[c])
        });
        self.push(out, Op::WrapDiff(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward() needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { nodes: grads }
    }

    /// Gradients of every parameter of `store` (zeros for unused ones).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Matrix> {
        store
            .ids()
            .map(|id| match self.params.get(&id).and_then(|&v| grads.wrt(v)) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = store.get(id).shape();
                    Matrix::zeros(r, c)
                }
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate_gemm(grads, *a, g, false, bm, true);
                accumulate_gemm(grads, *b, am, true, g, false);
            }
            Op::MatMulT(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate_gemm(grads, *a, g, false, bm, false);
                accumulate_gemm(grads, *b, g, true, am, false);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bm, |x, y| x * y));
                accumulate(grads, *b, g.zip_map(am, |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let (xm, rm) = (self.value(*x), self.value(*row));
                let gx = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * rm.get(0, c));
                accumulate(grads, *x, gx);
                accumulate(grads, *row, column_sums(&g.zip_map(xm, |a, b| a * b)));
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.map(|v| v * k)),
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => accumulate(grads, *x, g.zip_map(c, |a, b| a * b)),
            Op::Relu(x) => {
                let xm = self.value(*x);
                accumulate(grads, *x, g.zip_map(xm, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Elu(x) => {
                let xm = self.value(*x);
                accumulate(grads, *x, g.zip_map(xm, |gv, v| if v > 0.0 { gv } else { gv * v.exp() }));
            }
            Op::Sigmoid(x) => accumulate(grads, *x, g.zip_map(out, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => accumulate(grads, *x, g.zip_map(out, |gv, t| gv * (1.0 - t * t))),
            Op::Exp(x) => accumulate(grads, *x, g.zip_map(out, |gv, e| gv * e)),
            Op::Log(x) => {
                let xm = self.value(*x);
                accumulate(grads, *x, g.zip_map(xm, |gv, v| gv / v));
            }
            Op::Square(x) => {
                let xm = self.value(*x);
                accumulate(grads, *x, g.zip_map(xm, |gv, v| 2.0 * gv * v));
            }
            Op::Clamp(x, lo, hi) => {
                let xm = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    g.zip_map(xm, |gv, v| if v > *lo && v < *hi { gv } else { 0.0 }),
                );
            }
            Op::Minimum(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mask = am.zip_map(bm, |x, y| if x <= y { 1.0 } else { 0.0 });
                accumulate(grads, *a, g.zip_map(&mask, |gv, m| gv * m));
                accumulate(grads, *b, g.zip_map(&mask, |gv, m| gv * (1.0 - m)));
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, sr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for (c, dst) in gx.row_mut(r).iter_mut().enumerate() {
                        *dst = sr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (c, dst) in gx.row_mut(r).iter_mut().enumerate() {
                        *dst = g.get(r, c) - out.get(r, c).exp() * gsum;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::NormalizeRows(x, eps) => {
                let xm = self.value(*x);
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let row = xm.row(r);
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (gr, yr) = (g.row(r), out.row(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, dst) in gx.row_mut(r).iter_mut().enumerate() {
                        *dst = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                    accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in parts {
                    let h = self.value(p).rows();
                    let gp = Matrix::new(h, c, g.data()[offset * c..(offset + h) * c].to_vec());
                    accumulate(grads, p, gp);
                    offset += h;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for row in 0..r {
                    gx.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                gx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::RowSums(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::from_fn(r, c, |row, _| g.get(row, 0)));
            }
            Op::PickPerRow(x, idx) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for (row, &col) in idx.iter().enumerate() {
                    gx.set(row, col, g.get(row, 0));
                }
                accumulate(grads, *x, gx);
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (len, ch) = self.value(*x).shape();
                let mut gx = Matrix::zeros(len, ch);
                for o in 0..g.rows() {
                    for t in 0..*kernel {
                        let pos = (o * stride + t) as isize - *padding as isize;
                        if pos < 0 || pos as usize >= len {
                            continue;
                        }
                        let src = &g.row(o)[t * ch..(t + 1) * ch];
                        for (d, s) in gx.row_mut(pos as usize).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxPoolRows { x, argmax } => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for (k, &src) in argmax.iter().enumerate() {
                    if src != PAD {
                        gx.data_mut()[src] += g.data()[k];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::WrapDiff(x) => accumulate(grads, *x, g.clone()),
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    let m = if ta { a.cols() } else { a.rows() };
    let n = if tb { b.rows() } else { b.cols() };
    match &mut grads[v.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(m, n);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Signed difference of smallest magnitude among `d`, `d + period`,
/// `d − period`. Ties keep the earlier candidate.
#[inline]
pub fn wrap_signed(d: f64, period: f64) -> f64 {
    let mut best = d;
    for cand in [d + period, d - period] {
        if cand.abs() < best.abs() {
            best = cand;
        }
    }
    best
}
