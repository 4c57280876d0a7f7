//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output.
//! Inputs always precede their consumers, so the insertion order is a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    SwapAxes12(NodeId),
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    op: Op,
    value: Value<'p>,
    requires_grad: bool,
}

/// Records tensor operations for one forward pass.
///
/// Parameter leaves borrow their values from a [`ParamStore`]; the graph must
/// be dropped before the store is updated with the returned [`Gradients`].
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, NodeId>,
    zero_norm_rows: usize,
}

impl<'p> Graph<'p> {
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
        self.nodes[id.0].value.tensor()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    /// Number of all-zero rows seen by `l2_normalize_rows` so far.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Value::Owned(tensor),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf backed by a stored parameter. Requesting the same
    /// parameter twice yields the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Borrowed(store.get(id)),
            requires_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            (m, k, n),
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), t, &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                (m, k, n),
                transpose_b,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(Op::BatchMatMul { a, b, transpose_b }, t, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, t, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.last_dim();
        if vb.numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let bd = vb.data();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow { x, bias }, t, &[x, bias]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), t, &[a])
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(op, t, &[a])
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::SoftmaxRows(a), t, &[a])
    }

    /// Log-softmax over the last dimension, computed via log-sum-exp.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::LogSoftmaxRows(a), t, &[a])
    }

    /// Normalizes each vector along the last dimension to zero mean and unit
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vx.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            t,
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s), &[a])
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero and are
    /// counted in [`Graph::zero_norm_rows`].
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (d, shape) = (v.last_dim(), v.shape().to_vec());
        let mut data = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.rows());
        let mut zeros = 0;
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|a| *a /= norm);
            } else {
                zeros += 1;
            }
            norms.push(norm);
        }
        if zeros > 0 {
            log::warn!("l2 normalize: {zeros} zero row(s) left unnormalized");
            self.zero_norm_rows += zeros;
        }
        let t = Tensor::new(shape, data).expect("same shape");
        self.push(Op::L2NormalizeRows { x, norms }, t, &[x])
    }

    /// Selects rows of a `[V, d]` table; the result is `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if v.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a matrix, got {:?}",
                v.shape()
            )));
        }
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            t,
            &[table],
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a matrix, got {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let src = v.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::Transpose(a), t, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), t, &[a]))
    }

    /// Permutes `[A, B, C, D]` into `[A, C, B, D]`.
    pub fn swap_axes12(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let &[d0, d1, d2, d3] = v.shape() else {
            return Err(Error::Contract(format!(
                "swap_axes12 needs a rank-4 tensor, got {:?}",
                v.shape()
            )));
        };
        let data = swap12(v.data(), [d0, d1, d2, d3]);
        let t = Tensor::new(vec![d0, d2, d1, d3], data)?;
        Ok(self.push(Op::SwapAxes12(a), t, &[a]))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to every parameter leaf that it depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for (&pid, &node) in &self.param_nodes {
            if node.0 <= root.0 {
                if let Some(g) = grads[node.0].take() {
                    out.by_param.insert(pid, g);
                }
            }
        }
        Ok(out)
    }

    fn input_grad<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.tensor().numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.tensor();
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(da) = self.input_grad(grads, *a) {
                    gemm(g, vb.data(), da, (m, n, k), true);
                }
                if let Some(db) = self.input_grad(grads, *b) {
                    gemm_at(va.data(), g, db, (k, m, n));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = out.shape()[2];
                if let Some(da) = self.input_grad(grads, *a) {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &vb.data()[t * k * n..(t + 1) * k * n];
                        let das = &mut da[t * m * k..(t + 1) * m * k];
                        // dA = G·Bᵀ, or G·B when B was used transposed
                        gemm(gs, bs, das, (m, n, k), !transpose_b);
                    }
                }
                if let Some(db) = self.input_grad(grads, *b) {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &va.data()[t * m * k..(t + 1) * m * k];
                        let dbs = &mut db[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            gemm_at(gs, as_, dbs, (n, m, k));
                        } else {
                            gemm_at(as_, gs, dbs, (k, m, n));
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(d) = self.input_grad(grads, id) {
                        axpy(d, g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(d) = self.input_grad(grads, id) {
                        axpy(d, g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.input_grad(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.input_grad(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(d) = self.input_grad(grads, *x) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = self.input_grad(grads, *bias) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    axpy(d, g, *c);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.input_grad(grads, *a) {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    let n = out.last_dim();
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    let n = out.last_dim();
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let dim = gv.len();
                if let Some(d) = self.input_grad(grads, *x) {
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..dim {
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh /= dim as f64;
                        mean_ghx /= dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += s * (gr[j] * gv[j] - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                }
                if let Some(d) = self.input_grad(grads, *gain) {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, g), h) in d.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(d) = self.input_grad(grads, *bias) {
                    for gr in g.chunks(dim) {
                        axpy(d, gr, 1.0);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.input_grad(grads, *a) {
                    for (d, x) in d.iter_mut().zip(x) {
                        *d += 2.0 * g[0] * x;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if let Some(d) = self.input_grad(grads, *x) {
                    let n = out.last_dim();
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            d[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(d) = self.input_grad(grads, *table) {
                    let n = out.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * n..(id + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    let (n, m) = (out.shape()[0], out.shape()[1]);
                    for i in 0..n {
                        for j in 0..m {
                            d[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    axpy(d, g, 1.0);
                }
            }
            Op::SwapAxes12(a) => {
                if let Some(d) = self.input_grad(grads, *a) {
                    let s = out.shape();
                    // swapping the middle axes is its own inverse
                    let back = swap12(g, [s[0], s[1], s[2], s[3]]);
                    axpy(d, &back, 1.0);
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn swap12(src: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let from = ((a * d1 + b) * d2 + c) * d3;
                let to = ((a * d2 + c) * d1 + b) * d3;
                out[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
    out
}

/// `out += A·B` (or `A·Bᵀ` when `transpose_b`), with `A: [m, k]` and the
/// logical `B: [k, n]`.
fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    (m, k, n): (usize, usize, usize),
    transpose_b: bool,
) {
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// `out += Aᵀ·B` for `A: [r, m]`, `B: [r, n]`, `out: [m, n]`; the shape
/// triple is `(m, r, n)`.
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], (m, r, n): (usize, usize, usize)) {
    for p in 0..r {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for (i, &aip) in ar.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += aip * bv;
            }
        }
    }
}
