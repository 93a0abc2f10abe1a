//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the
//! [`ModelState`](crate::state::ModelState) parameters that fed the graph.
//! One tape = one forward/backward pass; tapes are cheap to build per batch.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Input,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Square(NodeId),
    ScaleConst(NodeId, f64),
    ScaleByScalar(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    Gelu(NodeId),
    Mish(NodeId),
    Dropout(NodeId, Tensor<T>),
    Lookup(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    NormalizeRows(NodeId),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation, ready for one backward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn mish_scalar<T: Real>(x: T) -> T {
    x * softplus(x).tanh()
}

fn mish_grad<T: Real>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::ONE - t * t) * sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let u = c * (x + k * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let half = T::from_f64(0.5);
    half * (T::ONE + t)
        + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * k * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        NodeId(nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn value_cloned(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value.data()[0].to_f64()
    }

    /// Records a constant input (no gradient flows into it).
    pub fn input(&self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Records a parameter leaf; gradients accumulate into the state by name.
    pub fn param(&self, state: &ModelState<T>, name: &str) -> Result<NodeId> {
        let p = state.get(name)?;
        Ok(self.push(p.value.clone(), Op::Param(name.to_string())))
    }

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok((ta.clone(), tb.clone()))
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape("add", a, b)?;
        let out = ta.zip_map(&tb, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape("sub", a, b)?;
        let out = ta.zip_map(&tb, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape("mul", a, b)?;
        let out = ta.zip_map(&tb, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn square(&self, a: NodeId) -> NodeId {
        let out = self.nodes.borrow()[a.0].value.map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn scale_const(&self, a: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        let out = self.nodes.borrow()[a.0].value.map(|x| x * cv);
        self.push(out, Op::ScaleConst(a, c))
    }

    /// Multiplies every element of `a` by the scalar node `s` (shape [1]).
    pub fn scale_by_scalar(&self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        if nodes[s.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by_scalar",
                left: nodes[a.0].value.shape().to_vec(),
                right: nodes[s.0].value.shape().to_vec(),
            });
        }
        let sv = nodes[s.0].value.data()[0];
        let out = nodes[a.0].value.map(|x| x * sv);
        drop(nodes);
        Ok(self.push(out, Op::ScaleByScalar(a, s)))
    }

    /// Adds a length-n row vector to every row of an m x n tensor.
    pub fn add_row(&self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
        if ta.cols() != tr.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, tr.len());
        drop(nodes);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of an m x n tensor elementwise by a length-n row.
    pub fn mul_row(&self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
        if ta.cols() != tr.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o *= b;
            }
        }
        drop(nodes);
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: NodeId) -> NodeId {
        let out = self.nodes.borrow()[a.0].value.transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_rows(&self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: empty part list"));
        }
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &nodes[p.0].value;
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        drop(nodes);
        let out = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if start + len > t.rows() {
                return Err(Error::invalid(format!(
                    "slice_rows: rows [{start}, {}) out of 0..{}",
                    start + len,
                    t.rows()
                )));
            }
            let cols = t.cols();
            Tensor::from_vec(
                &[len, cols],
                t.data()[start * cols..(start + len) * cols].to_vec(),
            )?
        };
        Ok(self.push(out, Op::SliceRows(a, start, len)))
    }

    pub fn concat_cols(&self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: empty part list"));
        }
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].0].value.rows();
        let total_cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(&[rows, total_cols]);
        let mut col_off = 0;
        for &p in parts {
            let t = &nodes[p.0].value;
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: t.shape().to_vec(),
                });
            }
            let c = t.cols();
            for i in 0..rows {
                out.row_mut(i)[col_off..col_off + c].copy_from_slice(t.row(i));
            }
            col_off += c;
        }
        drop(nodes);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if start + len > t.cols() {
                return Err(Error::invalid(format!(
                    "slice_cols: cols [{start}, {}) out of 0..{}",
                    start + len,
                    t.cols()
                )));
            }
            let mut o = Tensor::zeros(&[t.rows(), len]);
            for i in 0..t.rows() {
                o.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
            }
            o
        };
        Ok(self.push(out, Op::SliceCols(a, start, len)))
    }

    pub fn softmax_rows(&self, a: NodeId) -> NodeId {
        let out = softmax_rows_value(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: NodeId) -> NodeId {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut o = t.clone();
            for i in 0..o.rows() {
                let row = o.row_mut(i);
                let max = row
                    .iter()
                    .fold(T::from_f64(f64::NEG_INFINITY), |m, &x| m.maximum(x));
                let lse = row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .fold(T::ZERO, |s, e| s + e)
                    .ln()
                    + max;
                row.iter_mut().for_each(|x| *x -= lse);
            }
            o
        };
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization (no affine): (x - mean) / sqrt(var + eps).
    pub fn layer_norm_rows(&self, a: NodeId, eps: f64) -> NodeId {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut o = t.clone();
            let n = o.cols() as f64;
            for i in 0..o.rows() {
                let row = o.row_mut(i);
                let mean = row.iter().map(|x| x.to_f64()).sum::<f64>() / n;
                let var = row
                    .iter()
                    .map(|x| (x.to_f64() - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let inv = T::from_f64(1.0 / (var + eps).sqrt());
                let mean = T::from_f64(mean);
                row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            }
            o
        };
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn gelu(&self, a: NodeId) -> NodeId {
        let out = self.nodes.borrow()[a.0].value.map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn mish(&self, a: NodeId) -> NodeId {
        let out = self.nodes.borrow()[a.0].value.map(mish_scalar);
        self.push(out, Op::Mish(a))
    }

    /// Inverted dropout. Identity when `rate == 0`; in training mode each
    /// element is zeroed with probability `rate` and survivors are scaled
    /// by 1/(1-rate).
    pub fn dropout(&self, a: NodeId, rate: f64, rng: &mut crate::rng::StreamRng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (out, mask) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let keep = T::from_f64(1.0 / (1.0 - rate));
            let mut mask = Tensor::zeros(t.shape());
            for m in mask.data_mut() {
                if rng.next_f64() >= rate {
                    *m = keep;
                }
            }
            (t.zip_map(&mask, |x, m| x * m)?, mask)
        };
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Gathers rows of `table` at `indices`.
    pub fn embedding_lookup(&self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let cols = t.cols();
            let mut o = Tensor::zeros(&[indices.len(), cols]);
            for (i, &idx) in indices.iter().enumerate() {
                if idx >= t.rows() {
                    return Err(Error::invalid(format!(
                        "embedding_lookup: index {idx} out of 0..{}",
                        t.rows()
                    )));
                }
                o.row_mut(i).copy_from_slice(t.row(idx));
            }
            o
        };
        Ok(self.push(out, Op::Lookup(table, indices.to_vec())))
    }

    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let s = self.nodes.borrow()[a.0]
            .value
            .data()
            .iter()
            .fold(T::ZERO, |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: NodeId) -> NodeId {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let n = t.len();
        let s = t.data().iter().fold(T::ZERO, |acc, &x| acc + x);
        let mean = s * T::from_f64(1.0 / n as f64);
        drop(nodes);
        self.push(Tensor::scalar(mean), Op::MeanAll(a))
    }

    /// L2-normalizes each row; zero rows pass through as zeros.
    pub fn normalize_rows(&self, a: NodeId) -> NodeId {
        let mut out = self.nodes.borrow()[a.0].value.clone();
        out.normalize_rows_in_place(NORM_EPS);
        self.push(out, Op::NormalizeRows(a))
    }

    /// Accumulates d(loss)/d(param) into `state` for every trainable
    /// parameter reachable from `loss`. The tape is consumed; a second
    /// call is a state error.
    pub fn backward(&self, loss: NodeId, state: &mut ModelState<T>) -> Result<()> {
        if self.consumed.replace(true) {
            return Err(Error::state(
                "backward called twice on the same tape without reset",
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward expects a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let accum = |grads: &mut Vec<Option<Tensor<T>>>, id: NodeId, delta: Tensor<T>| {
                match &mut grads[id.0] {
                    Some(existing) => existing
                        .add_assign(&delta)
                        .expect("gradient shapes agree by construction"),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => state.accumulate_grad(name, &g)?,
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(&nodes[b.0].value, |x, y| x * y)?;
                    let db = g.zip_map(&nodes[a.0].value, |x, y| x * y)?;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Square(a) => {
                    let two = T::from_f64(2.0);
                    let da = g.zip_map(&nodes[a.0].value, |gx, x| gx * two * x)?;
                    accum(&mut grads, *a, da);
                }
                Op::ScaleConst(a, c) => {
                    let cv = T::from_f64(*c);
                    accum(&mut grads, *a, g.map(|x| x * cv));
                }
                Op::ScaleByScalar(a, s) => {
                    let sv = nodes[s.0].value.data()[0];
                    accum(&mut grads, *a, g.map(|x| x * sv));
                    let ds = g
                        .data()
                        .iter()
                        .zip(nodes[a.0].value.data())
                        .fold(T::ZERO, |acc, (&gx, &ax)| acc + gx * ax);
                    accum(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, g.clone());
                    let cols = g.cols();
                    let mut dr = Tensor::zeros(nodes[row.0].value.shape());
                    for i in 0..g.rows() {
                        for (d, &gx) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += gx;
                        }
                    }
                    debug_assert_eq!(dr.len(), cols);
                    accum(&mut grads, *row, dr);
                }
                Op::MulRow(a, row) => {
                    let rv = &nodes[row.0].value;
                    let av = &nodes[a.0].value;
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, &r) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *d *= r;
                        }
                    }
                    let mut dr = Tensor::zeros(rv.shape());
                    for i in 0..g.rows() {
                        for ((d, &gx), &ax) in
                            dr.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i))
                        {
                            *d += gx * ax;
                        }
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *row, dr);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&nodes[b.0].value.transpose())?;
                    let db = nodes[a.0].value.transpose().matmul(&g)?;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    accum(&mut grads, *a, g.transpose());
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let r = nodes[p.0].value.rows();
                        let part = Tensor::from_vec(
                            &[r, cols],
                            g.data()[off * cols..(off + r) * cols].to_vec(),
                        )?;
                        accum(&mut grads, p, part);
                        off += r;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut da = Tensor::zeros(nodes[a.0].value.shape());
                    let cols = da.cols();
                    da.data_mut()[start * cols..(start + len) * cols]
                        .copy_from_slice(g.data());
                    accum(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = nodes[p.0].value.cols();
                        let mut part = Tensor::zeros(&[g.rows(), c]);
                        for i in 0..g.rows() {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        accum(&mut grads, p, part);
                        off += c;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let src = &nodes[a.0].value;
                    let mut da = Tensor::zeros(src.shape());
                    for i in 0..g.rows() {
                        da.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    accum(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let dot = y
                            .row(i)
                            .iter()
                            .zip(g.row(i))
                            .fold(T::ZERO, |acc, (&yv, &gv)| acc + yv * gv);
                        for (d, &yv) in da.row_mut(i).iter_mut().zip(y.row(i)) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value; // log-probabilities
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let gsum = g.row(i).iter().fold(T::ZERO, |acc, &gv| acc + gv);
                        for (d, &lp) in da.row_mut(i).iter_mut().zip(y.row(i)) {
                            *d -= lp.exp() * gsum;
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut da = Tensor::zeros(x.shape());
                    for i in 0..x.rows() {
                        let mean = x.row(i).iter().map(|v| v.to_f64()).sum::<f64>() / n;
                        let var = x
                            .row(i)
                            .iter()
                            .map(|v| (v.to_f64() - mean).powi(2))
                            .sum::<f64>()
                            / n;
                        let inv_sigma = T::from_f64(1.0 / (var + eps).sqrt());
                        let g_mean =
                            T::from_f64(g.row(i).iter().map(|v| v.to_f64()).sum::<f64>() / n);
                        let gy_mean = T::from_f64(
                            g.row(i)
                                .iter()
                                .zip(y.row(i))
                                .map(|(gv, yv)| gv.to_f64() * yv.to_f64())
                                .sum::<f64>()
                                / n,
                        );
                        for ((d, &gv), &yv) in
                            da.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i))
                        {
                            *d = (gv - g_mean - yv * gy_mean) * inv_sigma;
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = g.zip_map(&nodes[a.0].value, |gx, x| gx * gelu_grad(x))?;
                    accum(&mut grads, *a, da);
                }
                Op::Mish(a) => {
                    let da = g.zip_map(&nodes[a.0].value, |gx, x| gx * mish_grad(x))?;
                    accum(&mut grads, *a, da);
                }
                Op::Dropout(a, mask) => {
                    let da = g.zip_map(mask, |gx, m| gx * m)?;
                    accum(&mut grads, *a, da);
                }
                Op::Lookup(table, indices) => {
                    let mut dt = Tensor::zeros(nodes[table.0].value.shape());
                    for (i, &idx) in indices.iter().enumerate() {
                        let cols = dt.cols();
                        let dst = &mut dt.data_mut()[idx * cols..(idx + 1) * cols];
                        for (d, &gx) in dst.iter_mut().zip(g.row(i)) {
                            *d += gx;
                        }
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    let da = nodes[a.0].value.map(|_| gv);
                    accum(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let n = nodes[a.0].value.len() as f64;
                    let gv = g.data()[0] * T::from_f64(1.0 / n);
                    let da = nodes[a.0].value.map(|_| gv);
                    accum(&mut grads, *a, da);
                }
                Op::NormalizeRows(a) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let mut da = Tensor::zeros(x.shape());
                    for i in 0..x.rows() {
                        let norm = x
                            .row(i)
                            .iter()
                            .map(|v| v.to_f64() * v.to_f64())
                            .sum::<f64>()
                            .sqrt();
                        if norm < NORM_EPS {
                            continue; // degenerate rows pass no gradient
                        }
                        let dot = y
                            .row(i)
                            .iter()
                            .zip(g.row(i))
                            .fold(T::ZERO, |acc, (&yv, &gv)| acc + yv * gv);
                        let inv = T::from_f64(1.0 / norm);
                        for ((d, &gv), &yv) in
                            da.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i))
                        {
                            *d = (gv - yv * dot) * inv;
                        }
                    }
                    accum(&mut grads, *a, da);
                }
            }
        }
        state.mark_grads_fresh();
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-12;

pub(crate) fn softmax_rows_value<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut o = t.clone();
    for i in 0..o.rows() {
        let row = o.row_mut(i);
        let max = row
            .iter()
            .fold(T::from_f64(f64::NEG_INFINITY), |m, &x| m.maximum(x));
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::ONE / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::state::ModelState;

    fn state_with<T: Real>(name: &str, t: Tensor<T>) -> ModelState<T> {
        let mut s = ModelState::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(w * x), x fixed => grad(w) = x
        let x_data = vec![2.0f64, -3.0, 0.5];
        let mut state = state_with("w", Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let tape = Tape::new();
        let w = tape.param(&state, "w").unwrap();
        let x = tape.input(Tensor::from_vec(&[1, 3], x_data.clone()).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut state).unwrap();
        assert_eq!(state.get("w").unwrap().grad.data(), x_data.as_slice());
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w^2) at w=[1,2] => grad = [2,4]
        let mut state = state_with("w", Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap());
        let tape = Tape::new();
        let w = tape.param(&state, "w").unwrap();
        let sq = tape.square(w);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut state).unwrap();
        assert_eq!(state.get("w").unwrap().grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut state = state_with("w", Tensor::<f64>::scalar(1.0));
        let tape = Tape::new();
        let w = tape.param(&state, "w").unwrap();
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut state).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut state),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.layer_norm_rows(x, 1e-5);
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn mish_at_zero_is_zero() {
        assert_eq!(mish_scalar(0.0f64), 0.0);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut state = ModelState::new();
        state
            .insert("frozen", Tensor::<f64>::scalar(3.0), false)
            .unwrap();
        let tape = Tape::new();
        let w = tape.param(&state, "frozen").unwrap();
        let sq = tape.square(w);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut state).unwrap();
        assert_eq!(state.get("frozen").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn dropout_eval_rate_zero_is_identity() {
        let tape = Tape::<f32>::new();
        let mut rng = StreamRng::new(0).stream("d");
        let x = tape.input(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn embedding_lookup_scatter_adds_gradient() {
        let mut state = state_with(
            "table",
            Tensor::from_vec(&[3, 2], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let tape = Tape::new();
        let table = tape.param(&state, "table").unwrap();
        let gathered = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        let loss = tape.sum_all(gathered);
        tape.backward(loss, &mut state).unwrap();
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(
            state.get("table").unwrap().grad.data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn no_nan_on_extreme_magnitudes() {
        let tape = Tape::<f32>::new();
        let vals = vec![1e3f32, -1e3, 999.5, -0.0, 1.0, -999.9];
        let x = tape.input(Tensor::from_vec(&[2, 3], vals).unwrap());
        for y in [
            tape.softmax_rows(x),
            tape.log_softmax_rows(x),
            tape.layer_norm_rows(x, 1e-5),
            tape.gelu(x),
            tape.mish(x),
            tape.normalize_rows(x),
        ] {
            assert!(tape.value(y).all_finite());
        }
    }
}
