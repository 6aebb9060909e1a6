//! Reverse-mode tape over dense tensors.
//!
//! Nodes are appended in topological order and evaluated eagerly; backward
//! walks the tape in reverse. Every reduction uses a fixed summation order,
//! so two runs over the same inputs produce bit-identical values and
//! gradients.

use std::sync::Arc;

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Backward behavior of the spiking gate. The forward pass is always the
/// exact hard gate; `Surrogate` routes gradients through a sigmoid of the
/// pre-threshold gap so the threshold itself can be learned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikingMode {
    Exact,
    Surrogate { temperature: f64 },
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Prelu { x: NodeId, slope: NodeId },
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, inv_std: Vec<f64> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<Arc<Vec<bool>>>,
        weights: Vec<f64>,
        scale: f64,
    },
    Spiking {
        x: NodeId,
        threshold: NodeId,
        mode: SpikingMode,
    },
    ConcatCols(Vec<NodeId>),
    NarrowCols { x: NodeId, start: usize, len: usize },
    Flatten(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Pinball {
        pred: NodeId,
        target: f64,
        quantiles: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Per-pass computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let ng = tensor.requires_grad();
        self.push(Value::Owned(tensor), Op::Leaf, ng)
    }

    /// Leaf with no gradient, e.g. inputs and loss targets.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(Value::Owned(tensor), Op::Leaf, false)
    }

    /// Shared leaf backed by a parameter tensor; no data is copied.
    pub fn shared_leaf(&mut self, tensor: Arc<Tensor>, needs_grad: bool) -> NodeId {
        self.push(Value::Shared(tensor), Op::Leaf, needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    /// Gradient accumulated at `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(t), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(t), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(t), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::Scale(x, c), ng)
    }

    /// `[n, d] + [d]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NnError> {
        let d = self.value(row).len();
        if self.value(x).cols() != d {
            return Err(NnError::ShapeMismatch(format!(
                "add_row: {:?} + row of {}",
                self.value(x).shape(),
                d
            )));
        }
        let xv = self.value(x);
        let rv = self.value(row).data();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            for (a, b) in xv.row(r).iter().zip(rv) {
                data.push(a + b);
            }
        }
        let t = Tensor::from_vec(xv.shape(), data)?;
        let ng = self.needs(&[x, row]);
        Ok(self.push(Value::Owned(t), Op::AddRow(x, row), ng))
    }

    /// `[n, d] ⊙ [d]` broadcast over rows.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NnError> {
        let d = self.value(row).len();
        if self.value(x).cols() != d {
            return Err(NnError::ShapeMismatch(format!(
                "mul_row: {:?} x row of {}",
                self.value(x).shape(),
                d
            )));
        }
        let xv = self.value(x);
        let rv = self.value(row).data();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            for (a, b) in xv.row(r).iter().zip(rv) {
                data.push(a * b);
            }
        }
        let t = Tensor::from_vec(xv.shape(), data)?;
        let ng = self.needs(&[x, row]);
        Ok(self.push(Value::Owned(t), Op::MulRow(x, row), ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = super::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(t), Op::MatMul(a, b), ng))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(sigmoid);
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::tanh);
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::Tanh(x), ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::abs);
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::Abs(x), ng)
    }

    /// PReLU with a learnable scalar slope: `x if x >= 0 else slope * x`.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId, NnError> {
        if self.value(slope).len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "prelu slope must be a scalar, got {:?}",
                self.value(slope).shape()
            )));
        }
        let a = self.value(slope).item();
        let t = self.value(x).map(|v| if v >= 0.0 { v } else { a * v });
        let ng = self.needs(&[x, slope]);
        Ok(self.push(Value::Owned(t), Op::Prelu { x, slope }, ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            let start = data.len();
            for &v in row {
                let e = (v - mx).exp();
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= sum;
            }
            let _ = cols;
        }
        let t = Tensor::from_vec(xv.shape(), data).expect("softmax preserves shape");
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::SoftmaxRows(x), ng)
    }

    /// Row-wise standardization `(x - mean) / std` with population std,
    /// before any gain/bias. Rows with std below 1e-12 come back as zeros.
    pub fn layer_norm_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let n = xv.cols();
        if n < 2 {
            return Err(NnError::ShapeMismatch(format!(
                "layer_norm needs rows of length >= 2, got {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                inv_std.push(0.0);
                data.extend(std::iter::repeat(0.0).take(n));
            } else {
                let inv = 1.0 / std;
                inv_std.push(inv);
                data.extend(row.iter().map(|v| (v - mean) * inv));
            }
        }
        let t = Tensor::from_vec(xv.shape(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Owned(t), Op::LayerNormRows { x, inv_std }, ng))
    }

    /// Scaled dot-product attention. `mask`, when given, is row-major
    /// `[n, m]` with `true` marking visible key positions; masked positions
    /// are skipped outright so their K/V contents never enter the
    /// computation. A fully masked query row yields zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<NodeId, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows();
        let m = kv.rows();
        let dq = qv.cols();
        let dv = vv.cols();
        if kv.cols() != dq || vv.rows() != m {
            return Err(NnError::ShapeMismatch(format!(
                "attention q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if let Some(ma) = &mask {
            if ma.len() != n * m {
                return Err(NnError::ShapeMismatch(format!(
                    "attention mask of {} for {}x{}",
                    ma.len(),
                    n,
                    m
                )));
            }
        }
        let scale = 1.0 / (dq as f64).sqrt();
        let mut weights = vec![0.0; n * m];
        let mut out = vec![0.0; n * dv];
        let mut scores = vec![0.0; m];
        for i in 0..n {
            let q_row = qv.row(i);
            let visible = |j: usize| mask.as_ref().map_or(true, |ma| ma[i * m + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if !visible(j) {
                    continue;
                }
                let s = dot(q_row, kv.row(j)) * scale;
                scores[j] = s;
                mx = mx.max(s);
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..m {
                if !visible(j) {
                    continue;
                }
                let e = (scores[j] - mx).exp();
                weights[i * m + j] = e;
                sum += e;
            }
            let o_row = &mut out[i * dv..(i + 1) * dv];
            for j in 0..m {
                if !visible(j) {
                    continue;
                }
                let w = weights[i * m + j] / sum;
                weights[i * m + j] = w;
                for (o, &x) in o_row.iter_mut().zip(vv.row(j)) {
                    *o += w * x;
                }
            }
        }
        let t = Tensor::from_vec(&[n, dv], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            Value::Owned(t),
            Op::Attention {
                q,
                k,
                v,
                mask,
                weights,
                scale,
            },
            ng,
        ))
    }

    /// Hard threshold gate: `x if x >= threshold else 0`. The forward value
    /// is exact in both modes; `mode` only selects the backward rule.
    pub fn spiking(
        &mut self,
        x: NodeId,
        threshold: NodeId,
        mode: SpikingMode,
    ) -> Result<NodeId, NnError> {
        if self.value(threshold).len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "spiking threshold must be a scalar, got {:?}",
                self.value(threshold).shape()
            )));
        }
        let th = self.value(threshold).item();
        let t = self.value(x).map(|v| if v >= th { v } else { 0.0 });
        let ng = self.needs(&[x, threshold]);
        Ok(self.push(Value::Owned(t), Op::Spiking { x, threshold, mode }, ng))
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(NnError::ShapeMismatch("concat of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(NnError::ShapeMismatch(format!(
                    "concat_cols row mismatch: {:?}",
                    self.value(p).shape()
                )));
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_vec(&[rows, cols], data)?;
        let ng = self.needs(parts);
        Ok(self.push(Value::Owned(t), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Column slice `[.., start..start+len]`.
    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "narrow {}..{} of {:?}",
                start,
                start + len,
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::from_vec(&[rows, len], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Owned(t), Op::NarrowCols { x, start, len }, ng))
    }

    /// `[n, d]` to `[1, n*d]`, row-major.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let t = Tensor::from_vec(&[1, xv.len()], xv.data().to_vec()).expect("len preserved");
        let ng = self.needs(&[x]);
        self.push(Value::Owned(t), Op::Flatten(x), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.needs(&[x]);
        self.push(Value::Owned(Tensor::scalar(s)), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let ng = self.needs(&[x]);
        self.push(Value::Owned(Tensor::scalar(s)), Op::MeanAll(x), ng)
    }

    /// Mean pinball loss of per-quantile predictions against one target.
    /// With residual `u = target - pred_j`, each term is
    /// `max(q_j * u, (q_j - 1) * u)`, so the minimizer is the q_j-quantile.
    pub fn pinball(
        &mut self,
        pred: NodeId,
        target: f64,
        quantiles: &[f64],
    ) -> Result<NodeId, NnError> {
        let pv = self.value(pred);
        if pv.len() != quantiles.len() {
            return Err(NnError::ShapeMismatch(format!(
                "pinball: {} predictions for {} quantiles",
                pv.len(),
                quantiles.len()
            )));
        }
        for &q in quantiles {
            if !(q > 0.0 && q < 1.0) {
                return Err(NnError::QuantileOutOfRange(q));
            }
        }
        let mut acc = 0.0;
        for (j, &q) in quantiles.iter().enumerate() {
            let u = target - pv.data()[j];
            acc += (q * u).max((q - 1.0) * u);
        }
        let t = Tensor::scalar(acc / quantiles.len() as f64);
        let ng = self.needs(&[pred]);
        Ok(self.push(
            Value::Owned(t),
            Op::Pinball {
                pred,
                target,
                quantiles: quantiles.to_vec(),
            },
            ng,
        ))
    }

    /// Backpropagate from a scalar output node, seeding with 1.
    pub fn backward(&mut self, out: NodeId) -> Result<(), NnError> {
        self.backward_seeded(out, 1.0)
    }

    pub fn backward_seeded(&mut self, out: NodeId, seed: f64) -> Result<(), NnError> {
        if self.value(out).len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        if !self.nodes[out.0].needs_grad {
            return Ok(());
        }
        self.grads[out.0] = Some(vec![seed]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let len = node.value.get().len();
        let buf = self.grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Parent ids always precede i, so reads of values and writes of
        // parent grads never alias the node being processed.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, |ga| add_assign(ga, g));
                self.acc_grad(b, |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, |ga| add_assign(ga, g));
                self.acc_grad(b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv: Vec<f64> = self.value(b).data().to_vec();
                let av: Vec<f64> = self.value(a).data().to_vec();
                self.acc_grad(a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += x * y;
                    }
                });
                self.acc_grad(b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(&av) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.acc_grad(x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let (x, row) = (*x, *row);
                let d = self.value(row).len();
                self.acc_grad(x, |gx| add_assign(gx, g));
                self.acc_grad(row, |gr| {
                    for chunk in g.chunks_exact(d) {
                        add_assign(gr, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (x, row) = (*x, *row);
                let d = self.value(row).len();
                let rv: Vec<f64> = self.value(row).data().to_vec();
                let xv: Vec<f64> = self.value(x).data().to_vec();
                self.acc_grad(x, |gx| {
                    for (r, chunk) in g.chunks_exact(d).enumerate() {
                        let o_row = &mut gx[r * d..(r + 1) * d];
                        for ((o, &gv), &sv) in o_row.iter_mut().zip(chunk).zip(&rv) {
                            *o += gv * sv;
                        }
                    }
                });
                self.acc_grad(row, |gr| {
                    for (r, chunk) in g.chunks_exact(d).enumerate() {
                        let x_row = &xv[r * d..(r + 1) * d];
                        for ((o, &gv), &sv) in gr.iter_mut().zip(chunk).zip(x_row) {
                            *o += gv * sv;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                let bv: Vec<f64> = self.value(b).data().to_vec();
                let av: Vec<f64> = self.value(a).data().to_vec();
                // dA = dC @ B^T ; dB = A^T @ dC
                self.acc_grad(a, |ga| matmul_bt_acc(g, &bv, ga, m, n, k));
                self.acc_grad(b, |gb| matmul_at_acc(&av, g, gb, m, k, n));
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yv: Vec<f64> = self.value(NodeId(i)).data().to_vec();
                self.acc_grad(x, |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&yv) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let x = *x;
                let yv: Vec<f64> = self.value(NodeId(i)).data().to_vec();
                self.acc_grad(x, |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&yv) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Abs(x) => {
                let x = *x;
                let xv: Vec<f64> = self.value(x).data().to_vec();
                self.acc_grad(x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += gv * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let a = self.value(slope).item();
                let xv: Vec<f64> = self.value(x).data().to_vec();
                self.acc_grad(x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += gv * if v >= 0.0 { 1.0 } else { a };
                    }
                });
                self.acc_grad(slope, |gs| {
                    let mut acc = 0.0;
                    for (&gv, &v) in g.iter().zip(&xv) {
                        if v < 0.0 {
                            acc += gv * v;
                        }
                    }
                    gs[0] += acc;
                });
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let cols = self.value(NodeId(i)).cols();
                let yv: Vec<f64> = self.value(NodeId(i)).data().to_vec();
                self.acc_grad(x, |gx| {
                    for (r, chunk) in g.chunks_exact(cols).enumerate() {
                        let y_row = &yv[r * cols..(r + 1) * cols];
                        let dotp = dot(y_row, chunk);
                        let o_row = &mut gx[r * cols..(r + 1) * cols];
                        for ((o, &gv), &y) in o_row.iter_mut().zip(chunk).zip(y_row) {
                            *o += y * (gv - dotp);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let cols = self.value(NodeId(i)).cols();
                let yv: Vec<f64> = self.value(NodeId(i)).data().to_vec();
                let nf = cols as f64;
                self.acc_grad(x, |gx| {
                    for (r, chunk) in g.chunks_exact(cols).enumerate() {
                        let inv = inv_std[r];
                        if inv == 0.0 {
                            continue; // degenerate rows contribute nothing
                        }
                        let y_row = &yv[r * cols..(r + 1) * cols];
                        let mean_g = chunk.iter().sum::<f64>() / nf;
                        let mean_gy = dot(chunk, y_row) / nf;
                        let o_row = &mut gx[r * cols..(r + 1) * cols];
                        for ((o, &gv), &y) in o_row.iter_mut().zip(chunk).zip(y_row) {
                            *o += inv * (gv - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                weights,
                scale,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let scale = *scale;
                let mask = mask.clone();
                let n = self.value(q).rows();
                let m = self.value(k).rows();
                let dq = self.value(q).cols();
                let dv = self.value(v).cols();
                let w = weights.clone();
                let qv: Vec<f64> = self.value(q).data().to_vec();
                let kv: Vec<f64> = self.value(k).data().to_vec();
                let vv: Vec<f64> = self.value(v).data().to_vec();
                // dV = W^T dO ; softmax backward per row; dQ, dK via scores.
                let mut g_scores = vec![0.0; n * m];
                for i_row in 0..n {
                    let g_row = &g[i_row * dv..(i_row + 1) * dv];
                    let w_row = &w[i_row * m..(i_row + 1) * m];
                    let visible =
                        |j: usize| mask.as_ref().map_or(true, |ma| ma[i_row * m + j]);
                    let mut gw = vec![0.0; m];
                    let mut s = 0.0;
                    for j in 0..m {
                        if !visible(j) {
                            continue;
                        }
                        gw[j] = dot(g_row, &vv[j * dv..(j + 1) * dv]);
                        s += w_row[j] * gw[j];
                    }
                    for j in 0..m {
                        if !visible(j) {
                            continue;
                        }
                        g_scores[i_row * m + j] = w_row[j] * (gw[j] - s) * scale;
                    }
                }
                self.acc_grad(v, |gv_buf| {
                    for i_row in 0..n {
                        let g_row = &g[i_row * dv..(i_row + 1) * dv];
                        let w_row = &w[i_row * m..(i_row + 1) * m];
                        let visible =
                            |j: usize| mask.as_ref().map_or(true, |ma| ma[i_row * m + j]);
                        for j in 0..m {
                            if !visible(j) || w_row[j] == 0.0 {
                                continue;
                            }
                            let o_row = &mut gv_buf[j * dv..(j + 1) * dv];
                            for (o, &x) in o_row.iter_mut().zip(g_row) {
                                *o += w_row[j] * x;
                            }
                        }
                    }
                });
                self.acc_grad(q, |gq| matmul_acc(&g_scores, &kv, gq, n, m, dq));
                self.acc_grad(k, |gk| matmul_at_acc(&g_scores, &qv, gk, n, m, dq));
            }
            Op::Spiking { x, threshold, mode } => {
                let (x, threshold, mode) = (*x, *threshold, *mode);
                let th = self.value(threshold).item();
                let xv: Vec<f64> = self.value(x).data().to_vec();
                match mode {
                    SpikingMode::Exact => {
                        self.acc_grad(x, |gx| {
                            for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(&xv) {
                                if v >= th {
                                    *o += gv;
                                }
                            }
                        });
                        // d/d(threshold) of the hard gate is zero a.e.
                    }
                    SpikingMode::Surrogate { temperature } => {
                        let inv_t = 1.0 / temperature;
                        // backward of x * sigmoid((x - th)/T)
                        self.acc_grad(x, |gx| {
                            for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(&xv) {
                                let s = sigmoid((v - th) * inv_t);
                                *o += gv * (s + v * s * (1.0 - s) * inv_t);
                            }
                        });
                        self.acc_grad(threshold, |gt| {
                            let mut acc = 0.0;
                            for (&gv, &v) in g.iter().zip(&xv) {
                                let s = sigmoid((v - th) * inv_t);
                                acc -= gv * v * s * (1.0 - s) * inv_t;
                            }
                            gt[0] += acc;
                        });
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = self.value(NodeId(i)).rows();
                let total = self.value(NodeId(i)).cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let off = offset;
                    self.acc_grad(p, |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            let dst = &mut gp[r * w..(r + 1) * w];
                            add_assign(dst, src);
                        }
                    });
                    offset += w;
                }
            }
            Op::NarrowCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let rows = self.value(NodeId(i)).rows();
                let full = self.value(x).cols();
                self.acc_grad(x, |gx| {
                    for r in 0..rows {
                        let src = &g[r * len..(r + 1) * len];
                        let dst = &mut gx[r * full + start..r * full + start + len];
                        add_assign(dst, src);
                    }
                });
            }
            Op::Flatten(x) => {
                let x = *x;
                self.acc_grad(x, |gx| add_assign(gx, g));
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g[0];
                self.acc_grad(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.value(x).len() as f64;
                let gv = g[0] / n;
                self.acc_grad(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Pinball {
                pred,
                target,
                quantiles,
            } => {
                let pred = *pred;
                let target = *target;
                let quantiles = quantiles.clone();
                let pv: Vec<f64> = self.value(pred).data().to_vec();
                let nq = quantiles.len() as f64;
                let gv = g[0];
                self.acc_grad(pred, |gp| {
                    for (j, &q) in quantiles.iter().enumerate() {
                        let u = target - pv[j];
                        let du = if u >= 0.0 { q } else { q - 1.0 };
                        gp[j] += gv * (-du) / nq;
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_leaf(t: Tensor) -> Tensor {
        let mut t = t;
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn add_backward_is_identity() {
        let mut g = Graph::new();
        let a = g.leaf(grad_leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()));
        let b = g.leaf(grad_leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()));
        let s = g.add(a, b).unwrap();
        let out = g.sum_all(s);
        g.backward(out).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mul_same_node_doubles_grad() {
        let mut g = Graph::new();
        let x = g.leaf(grad_leaf(Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()));
        let sq = g.mul(x, x).unwrap();
        let out = g.sum_all(sq);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 2f64.ln(), 0.0]).unwrap());
        let y = g.softmax_rows(x);
        let v = g.value(y);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(0, 1) - 0.5).abs() < 1e-15);
        assert!((v.at(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.at(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(v.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn prelu_values() {
        let mut g = Graph::new();
        let slope = g.constant(Tensor::scalar(0.25));
        let x = g.constant(Tensor::from_vec(&[2], vec![-2.0, 3.0]).unwrap());
        let y = g.prelu(x, slope).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn layer_norm_hand_values_and_degenerate_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap());
        let y = g.layer_norm_rows(x).unwrap();
        let v = g.value(y);
        let e = 1.224744871391589;
        assert!((v.at(0, 0) + e).abs() < 1e-12);
        assert!((v.at(0, 1)).abs() < 1e-12);
        assert!((v.at(0, 2) - e).abs() < 1e-12);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let k = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let v = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let o = g.attention(q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[2.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 1, vec![10.0, 20.0]).unwrap());
        let o = g.attention(q, k, v, None).unwrap();
        assert!((g.value(o).data()[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_ignores_future_rows() {
        // Row 0 may only see key 0; garbage in K/V row 1 must not leak.
        let mask = Arc::new(vec![true, false, true, true]);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let k = g.constant(Tensor::matrix(2, 1, vec![0.5, 9e99]).unwrap());
        let v = g.constant(Tensor::matrix(2, 1, vec![7.0, 9e99]).unwrap());
        let o = g.attention(q, k, v, Some(mask)).unwrap();
        assert_eq!(g.value(o).at(0, 0), 7.0);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mask = Arc::new(vec![false, false]);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let k = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let o = g.attention(q, k, v, Some(mask)).unwrap();
        assert_eq!(g.value(o).data(), &[0.0]);
    }

    #[test]
    fn spiking_forward_piecewise() {
        let mut g = Graph::new();
        let th = g.constant(Tensor::scalar(0.5));
        let x = g.constant(Tensor::from_vec(&[3], vec![0.4, 0.6, 0.5]).unwrap());
        let y = g.spiking(x, th, SpikingMode::Exact).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.6, 0.5]);

        // very negative threshold acts as the identity
        let mut g = Graph::new();
        let th = g.constant(Tensor::scalar(-1e18));
        let x = g.constant(Tensor::from_vec(&[3], vec![-5.0, 0.0, 5.0]).unwrap());
        let y = g.spiking(x, th, SpikingMode::Exact).unwrap();
        assert_eq!(g.value(y).data(), &[-5.0, 0.0, 5.0]);
    }

    #[test]
    fn pinball_hand_values() {
        let mut g = Graph::new();
        // q=0.5, pred 2, y 1 -> 0.5
        let p = g.constant(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let l = g.pinball(p, 1.0, &[0.5]).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
        // zero residual -> 0
        let p = g.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let l = g.pinball(p, 1.0, &[0.1, 0.9]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // q out of range
        let p = g.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        assert!(matches!(
            g.pinball(p, 0.0, &[1.0]),
            Err(NnError::QuantileOutOfRange(_))
        ));
    }

    #[test]
    fn matmul_bias_grad_is_ones() {
        // gradient of sum(x @ W + b) w.r.t. b is all-ones
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = g.leaf(grad_leaf(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()));
        let b = g.leaf(grad_leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()));
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_row(xw, b).unwrap();
        let out = g.sum_all(y);
        g.backward(out).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(grad_leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()));
        assert!(g.backward(x).is_err());
    }
}
