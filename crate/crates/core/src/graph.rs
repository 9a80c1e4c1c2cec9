//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] records every op in insertion order. [`Graph::backward`]
//! walks the record once in reverse, so gradient accumulation order is
//! fixed by construction order and results are bitwise reproducible.
//! Nodes that depend on no trainable parameter and no gradient-carrying
//! input are skipped during the backward sweep.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::esda;
use crate::math;
use crate::objective;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Tensor),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    MeanRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterAddRows {
        base: NodeId,
        delta: NodeId,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Reshape(NodeId),
    TopKRenorm {
        x: NodeId,
        selected: Vec<usize>,
        mass: f64,
    },
    ScaleByEntry {
        x: NodeId,
        weights: NodeId,
        index: usize,
    },
    SumSquares(NodeId),
    Mmd2 {
        a: NodeId,
        b: NodeId,
        sigma: f64,
    },
    GaussianNll {
        x: NodeId,
        target: f64,
    },
    SquaredError {
        x: NodeId,
        target: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> Error {
    Error::Shape {
        op,
        left: left.shape(),
        right: right.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::node`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = store.param(id);
        let n = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("linear_map", va, vb));
        }
        let v = matmul(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_bt", va, vb));
        }
        let v = matmul_bt(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulBt(a, b), ng))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_raw(va.rows(), va.cols(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Adds a `1 × C` row to every row of an `L × C` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(shape_err("add_row", vx, vr));
        }
        let mut v = vx.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * s).collect();
        let v = Tensor::from_raw(vx.rows(), vx.cols(), data);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != mask.shape() {
            return Err(shape_err("mul_const", vx, &mask));
        }
        let data = vx.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::from_raw(vx.rows(), vx.cols(), data);
        let ng = self.needs(x);
        Ok(self.push(v, Op::MulConst(x, mask), ng))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if vg.shape() != (1, d) {
            return Err(shape_err("layer_norm", vx, vg));
        }
        if vb.shape() != (1, d) {
            return Err(shape_err("layer_norm", vx, vb));
        }
        let mut xhat = Tensor::zeros(vx.rows(), d);
        let mut out = Tensor::zeros(vx.rows(), d);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, vg.data()[c] * h + vb.data()[c]);
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| math::gelu(v)).collect();
        let v = Tensor::from_raw(vx.rows(), vx.cols(), data);
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = mean_rows(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::MeanRows(x), ng))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * vx.cols());
        for &r in rows {
            if r >= vx.rows() {
                return Err(Error::Precondition(alloc::format!(
                    "row index {r} out of range for {} rows",
                    vx.rows()
                )));
            }
            data.extend_from_slice(vx.row(r));
        }
        let v = Tensor::from_raw(rows.len(), vx.cols(), data);
        let ng = self.needs(x);
        Ok(self.push(v, Op::GatherRows(x, rows.to_vec()), ng))
    }

    /// Copy of `base` with `delta[j]` added to row `rows[j]`. Other rows are copied verbatim.
    pub fn scatter_add_rows(&mut self, base: NodeId, delta: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (vb, vd) = (self.value(base), self.value(delta));
        if vd.rows() != rows.len() || vd.cols() != vb.cols() {
            return Err(shape_err("scatter_add_rows", vb, vd));
        }
        let mut v = vb.clone();
        for (j, &r) in rows.iter().enumerate() {
            if r >= v.rows() {
                return Err(Error::Precondition(alloc::format!(
                    "row index {r} out of range for {} rows",
                    v.rows()
                )));
            }
            for (o, d) in v.row_mut(r).iter_mut().zip(vd.row(j)) {
                *o += d;
            }
        }
        let ng = self.needs(base) || self.needs(delta);
        Ok(self.push(
            v,
            Op::ScatterAddRows {
                base,
                delta,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), vp));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(shape_err("stack_rows", self.value(parts[0]), vp));
            }
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_raw(rows, cols, data),
            Op::StackRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.len() != rows * cols {
            return Err(Error::Length {
                rows,
                cols,
                len: vx.len(),
            });
        }
        let v = Tensor::from_raw(rows, cols, vx.data().to_vec());
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Keeps the `selected` entries of a `1 × n` probability row, zeroes the
    /// rest and rescales the kept entries to sum to one.
    pub fn top_k_renorm(&mut self, x: NodeId, selected: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rows() != 1 {
            return Err(Error::Precondition("top-k expects a single row".into()));
        }
        let mass: f64 = selected.iter().map(|&i| vx.data()[i]).sum();
        if !(mass > 0.0) {
            return Err(Error::Precondition("top-k kept mass is zero".into()));
        }
        let mut v = Tensor::zeros(1, vx.cols());
        for &i in selected {
            v.data_mut()[i] = vx.data()[i] / mass;
        }
        let ng = self.needs(x);
        Ok(self.push(
            v,
            Op::TopKRenorm {
                x,
                selected: selected.to_vec(),
                mass,
            },
            ng,
        ))
    }

    /// `x · weights[0, index]`.
    pub fn scale_by_entry(&mut self, x: NodeId, weights: NodeId, index: usize) -> Result<NodeId> {
        let w = *self
            .value(weights)
            .data()
            .get(index)
            .ok_or_else(|| Error::Precondition("weight index out of range".into()))?;
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * w).collect();
        let v = Tensor::from_raw(vx.rows(), vx.cols(), data);
        let ng = self.needs(x) || self.needs(weights);
        Ok(self.push(v, Op::ScaleByEntry { x, weights, index }, ng))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(Tensor::from_raw(1, 1, vec![s]), Op::SumSquares(x), ng)
    }

    /// Mini-batch MMD² between the row sets of `a` and `b` under a fixed-bandwidth RBF kernel.
    pub fn mmd2(&mut self, a: NodeId, b: NodeId, sigma: f64) -> Result<NodeId> {
        let s = esda::mmd2_rows(self.value(a), self.value(b), sigma)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(1, 1, vec![s]), Op::Mmd2 { a, b, sigma }, ng))
    }

    /// Heteroscedastic Gaussian NLL of a `1 × 2` `(μ, s)` node against a log-space target.
    pub fn gaussian_nll(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != (1, 2) {
            return Err(Error::Shape {
                op: "gaussian_nll",
                left: vx.shape(),
                right: (1, 2),
            });
        }
        let l = objective::nll(target, vx.data()[0], vx.data()[1]);
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(1, 1, vec![l]), Op::GaussianNll { x, target }, ng))
    }

    /// `(μ − target)²` on the mean channel of a `1 × 2` head output.
    pub fn squared_error(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != (1, 2) {
            return Err(Error::Shape {
                op: "squared_error",
                left: vx.shape(),
                right: (1, 2),
            });
        }
        let r = vx.data()[0] - target;
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_raw(1, 1, vec![r * r]),
            Op::SquaredError { x, target },
            ng,
        ))
    }

    /// Backpropagates from a scalar node with unit seed.
    pub fn backward_scalar(&self, loss: NodeId) -> Gradients {
        let seed = Tensor::from_raw(1, 1, vec![1.0]);
        self.backward(&[(loss, seed)])
    }

    /// Backpropagates the given output gradients through the record.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            assert_eq!(self.value(*id).shape(), seed.shape(), "seed shape mismatch");
            acc(&mut grads, *id, seed.clone());
        }
        let mut params = ParamGrads::new(0);
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads, &mut params);
            grads[i] = Some(dy);
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>], params: &mut ParamGrads) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::Param(id) => params.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, matmul_bt(dy, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_at(self.value(*a), dy));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, matmul(dy, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_at(dy, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, map(dy, |v| -v));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    acc(grads, *x, dy.clone());
                }
                if self.needs(*row) {
                    acc(grads, *row, column_sums(dy));
                }
            }
            Op::Scale(x, s) => acc(grads, *x, map(dy, |v| v * s)),
            Op::MulConst(x, mask) => acc(grads, *x, zip(dy, mask, |a, b| a * b)),
            Op::Softmax(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain);
                let d = y.cols();
                if self.needs(*gain) {
                    acc(grads, *gain, column_sums(&zip(dy, xhat, |a, b| a * b)));
                }
                if self.needs(*bias) {
                    acc(grads, *bias, column_sums(dy));
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(y.rows(), d);
                    for r in 0..y.rows() {
                        let (gr, hr) = (dy.row(r), xhat.row(r));
                        let dh: Vec<f64> = gr.iter().zip(g.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx.set(r, c, inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h));
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                acc(grads, *x, zip(dy, vx, |g, v| g * math::gelu_grad(v)));
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let n = vx.rows() as f64;
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for (o, g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                        *o = g / n;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::GatherRows(x, rows) => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                for (j, &r) in rows.iter().enumerate() {
                    for (o, g) in dx.row_mut(r).iter_mut().zip(dy.row(j)) {
                        *o += g;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ScatterAddRows { base, delta, rows } => {
                if self.needs(*base) {
                    acc(grads, *base, dy.clone());
                }
                if self.needs(*delta) {
                    let mut dd = Tensor::zeros(rows.len(), dy.cols());
                    for (j, &r) in rows.iter().enumerate() {
                        dd.row_mut(j).copy_from_slice(dy.row(r));
                    }
                    acc(grads, *delta, dd);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(vp.rows(), vp.cols());
                        for r in 0..vp.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + vp.cols()]);
                        }
                        acc(grads, p, dp);
                    }
                    offset += vp.cols();
                }
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.len();
                    if self.needs(p) {
                        let slice = dy.data()[start..start + n].to_vec();
                        acc(grads, p, Tensor::from_raw(vp.rows(), vp.cols(), slice));
                    }
                    start += n;
                }
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                acc(grads, *x, Tensor::from_raw(vx.rows(), vx.cols(), dy.data().to_vec()));
            }
            Op::TopKRenorm { x, selected, mass } => {
                let dot: f64 = selected.iter().map(|&i| dy.data()[i] * y.data()[i]).sum();
                let mut dx = Tensor::zeros(1, y.cols());
                for &i in selected {
                    dx.data_mut()[i] = (dy.data()[i] - dot) / mass;
                }
                acc(grads, *x, dx);
            }
            Op::ScaleByEntry { x, weights, index } => {
                let vw = self.value(*weights);
                let w = vw.data()[*index];
                if self.needs(*x) {
                    acc(grads, *x, map(dy, |v| v * w));
                }
                if self.needs(*weights) {
                    let vx = self.value(*x);
                    let s: f64 = dy.data().iter().zip(vx.data()).map(|(a, b)| a * b).sum();
                    let mut dw = Tensor::zeros(vw.rows(), vw.cols());
                    dw.data_mut()[*index] = s;
                    acc(grads, *weights, dw);
                }
            }
            Op::SumSquares(x) => {
                let g = dy.data()[0];
                acc(grads, *x, map(self.value(*x), |v| 2.0 * v * g));
            }
            Op::Mmd2 { a, b, sigma } => {
                let g = dy.data()[0];
                let (ga, gb) = esda::mmd2_rows_grad(self.value(*a), self.value(*b), *sigma);
                if self.needs(*a) {
                    acc(grads, *a, map(&ga, |v| v * g));
                }
                if self.needs(*b) {
                    acc(grads, *b, map(&gb, |v| v * g));
                }
            }
            Op::GaussianNll { x, target } => {
                let g = dy.data()[0];
                let vx = self.value(*x);
                let (dmu, ds) = objective::nll_grad(*target, vx.data()[0], vx.data()[1]);
                acc(grads, *x, Tensor::from_raw(1, 2, vec![dmu * g, ds * g]));
            }
            Op::SquaredError { x, target } => {
                let g = dy.data()[0];
                let r = self.value(*x).data()[0] - target;
                acc(grads, *x, Tensor::from_raw(1, 2, vec![2.0 * r * g, 0.0]));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient reaching a node, if any path to it carried one.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn mean_rows(x: &Tensor) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    let mut out = column_sums(x);
    let n = x.rows() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
