//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! leaves a gradient on every leaf created with `requires_grad`. After the
//! walk all intermediate activations are released and the graph refuses
//! further use; build a new graph for the next forward pass.
//!
//! All reductions sum in ascending index order, so forward and backward are
//! bitwise reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{GpsError, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed outside the graph and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    /// Softmax over the last dimension.
    Softmax,
}

impl FromStr for Activation {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "softmax" | "softmax-lastdim" => Ok(Activation::Softmax),
            other => Err(GpsError::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    MeanAxis(NodeId, usize),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::MeanAxis(x, _)
            | Op::Sum(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Scale(..) => "scale",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::MeanAxis(..) => "mean_axis",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    released: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> GpsError {
    GpsError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    /// A leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            released: false,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        let node = &self.nodes[id.0];
        if node.released {
            return Err(GpsError::State(format!(
                "activation of node {} ({}) was released by backward",
                id.0,
                node.op.name()
            )));
        }
        Ok(&node.value)
    }

    /// Gradient of the last backward pass w.r.t. a leaf created with `requires_grad`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(GpsError::State(
                "graph already consumed by backward; run a new forward pass".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            released: false,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.live()?;
        let (sa, sb) = (self.v(a).shape(), self.v(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.v(a).data(), self.v(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.live()?;
        let (sa, sb) = (self.v(a).shape(), self.v(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.v(a).data(), self.v(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_kernel(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.live()?;
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.live()?;
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[..., n] + bias[n]`, broadcasting over all leading dimensions.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.live()?;
        let (tx, tb) = (self.v(x), self.v(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.numel() != n || n == 0 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x[N, C, ...] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.live()?;
        let (tx, tb) = (self.v(x), self.v(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tb.numel() != tx.shape()[1] {
            return Err(shape_err("add_channel_bias", tx.shape(), tb.shape()));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddChannelBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.live()?;
        let out = self.v(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale(x, factor)))
    }

    /// Cross-correlation of `input[N, C_in, H, W]` with `kernel[C_out, C_in, kh, kw]` and zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.live()?;
        let (ti, tk) = (self.v(input), self.v(kernel));
        let geo = ConvGeometry::new(ti.shape(), tk.shape(), stride, padding)?;
        let out = geo.forward(ti.data(), tk.data());
        let out = Tensor::new(vec![geo.n, geo.c_out, geo.h_out, geo.w_out], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Normalizes each row of the last dimension, then applies `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.live()?;
        if !(eps > 0.0) {
            return Err(GpsError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.v(x), self.v(gamma), self.v(beta));
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(GpsError::Dimension(format!(
                "layer_norm: input {:?} with gamma {:?} and beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        let (xd, g, b) = (tx.data(), tg.data(), tb.data());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let out = self.v(x).map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(x)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let out = self.v(x).map(gelu);
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let tx = self.v(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(GpsError::Dimension(format!(
                "softmax needs a non-empty last dimension, got {:?}",
                tx.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.live()?;
        let out = self.v(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.live()?;
        let tx = self.v(x);
        let mut seen = vec![false; tx.rank()];
        if axes.len() != tx.rank()
            || axes
                .iter()
                .any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(GpsError::Dimension(format!(
                "permute: axes {axes:?} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let out = permute_tensor(tx, axes);
        Ok(self.push(out, Op::Permute(x, axes.to_vec())))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.live()?;
        let tx = self.v(x);
        if axis >= tx.rank() || tx.shape()[axis] == 0 {
            return Err(GpsError::Dimension(format!(
                "mean_axis: axis {axis} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let xd = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let s = self.v(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Cross-entropy of `logits[B, C]` against class indices, log-sum-exp stabilized.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        self.live()?;
        let tl = self.v(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() || tl.shape()[0] == 0 {
            return Err(GpsError::Dimension(format!(
                "cross_entropy: logits {:?} with {} labels",
                tl.shape(),
                labels.len()
            )));
        }
        let (b, c) = (tl.shape()[0], tl.shape()[1]);
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(GpsError::Input(format!(
                "label {y} at position {i} outside [0, {c})"
            )));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[labels[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        if reduction == Reduction::Mean {
            total /= b as f64;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
        ))
    }

    /// Records an externally computed value with a user-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<NodeId> {
        self.live()?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every leaf created with `requires_grad`.
    ///
    /// Leaves that do not influence the loss receive zero gradients. The graph
    /// is consumed: intermediate activations are dropped and further ops or a
    /// second backward fail with a state error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.live()?;
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(GpsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            let contribs = self.vjp(id, &gout);
            for (input, g) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, grad) in self.nodes.iter_mut().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad && grad.is_none() {
                    *grad = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                *grad = None;
                node.value = Tensor::zeros(&[0]);
                node.op = Op::Leaf;
                node.released = true;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn vjp(&self, id: usize, gout: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id];
        let g = gout.data();
        let need = |n: NodeId| self.nodes[n.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    let da = matmul_bt_kernel(g, tb.data(), m, n, k);
                    out.push((*a, tensor(ta.shape(), da)));
                }
                if need(*b) {
                    let db = matmul_at_kernel(ta.data(), g, m, k, n);
                    out.push((*b, tensor(tb.shape(), db)));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let (ad, bd) = (ta.data(), tb.data());
                if need(*a) {
                    let mut da = Vec::with_capacity(ta.numel());
                    for i in 0..bs {
                        da.extend(matmul_bt_kernel(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    out.push((*a, tensor(ta.shape(), da)));
                }
                if need(*b) {
                    let mut db = Vec::with_capacity(tb.numel());
                    for i in 0..bs {
                        db.extend(matmul_at_kernel(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    out.push((*b, tensor(tb.shape(), db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                if need(*a) {
                    let d = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    out.push((*a, tensor(ta.shape(), d)));
                }
                if need(*b) {
                    let d = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    out.push((*b, tensor(tb.shape(), d)));
                }
            }
            Op::AddBias(x, b) => {
                out.push((*x, gout.clone()));
                if need(*b) {
                    let n = self.v(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, tensor(&[n], db)));
                }
            }
            Op::AddChannelBias(x, b) => {
                out.push((*x, gout.clone()));
                if need(*b) {
                    let shape = self.v(*x).shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    out.push((*b, tensor(&[c], db)));
                }
            }
            Op::Scale(x, f) => {
                out.push((*x, gout.map(|v| v * f)));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (ti, tk) = (self.v(*input), self.v(*kernel));
                let geo = ConvGeometry::new(ti.shape(), tk.shape(), *stride, *padding)
                    .expect("validated in forward");
                let (di, dk) = geo.backward(ti.data(), tk.data(), g, need(*input), need(*kernel));
                if let Some(di) = di {
                    out.push((*input, tensor(ti.shape(), di)));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, tensor(tk.shape(), dk)));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.v(*gamma).data();
                let d = gm.len();
                let rows = g.len() / d;
                if need(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_gh = 0.0;
                        let mut sum_ghh = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gm[j];
                            sum_gh += gh;
                            sum_ghh += gh * hr[j];
                        }
                        let mean_gh = sum_gh / d as f64;
                        let mean_ghh = sum_ghh / d as f64;
                        for j in 0..d {
                            let gh = gr[j] * gm[j];
                            dx[r * d + j] = rstd[r] * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    out.push((*x, tensor(self.v(*x).shape(), dx)));
                }
                if need(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, tensor(&[d], dg)));
                }
                if need(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    out.push((*beta, tensor(&[d], db)));
                }
            }
            Op::Relu(x) => {
                let tx = self.v(*x);
                let d = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((*x, tensor(tx.shape(), d)));
            }
            Op::Gelu(x) => {
                let tx = self.v(*x);
                let d = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                out.push((*x, tensor(tx.shape(), d)));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, tensor(node.value.shape(), dx)));
            }
            Op::Reshape(x) => {
                let shape = self.v(*x).shape();
                out.push((*x, tensor(shape, g.to_vec())));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, permute_tensor(gout, &inverse)));
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.v(*x).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                out.push((*x, tensor(shape, dx)));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.v(*x).shape(), g[0])));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let shape = self.v(*logits).shape();
                let c = shape[1];
                let scale = match reduction {
                    Reduction::Mean => g[0] / labels.len() as f64,
                    Reduction::Sum => g[0],
                };
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, tensor(shape, d)));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| self.v(*i)).collect();
                let grads = op.backward(&ins, &node.value, gout);
                assert_eq!(grads.len(), inputs.len(), "custom op {} arity", op.name());
                out.extend(inputs.iter().copied().zip(grads));
            }
        }
        out
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches its input")
}

/// `[m, k] x [k, n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `g[m, n] x b[k, n]^T -> [m, k]`.
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `a[m, k]^T x g[m, n] -> [k, n]`.
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for _ in 0..x.numel() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(xd[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves element count")
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(shape_err("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(GpsError::Config("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(GpsError::Dimension(format!(
                "conv2d: kernel {kernel:?} larger than padded input {input:?} (padding {padding})"
            )));
        }
        Ok(ConvGeometry {
            n: input[0],
            c_in: input[1],
            h,
            w,
            c_out: kernel[0],
            kh,
            kw,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None` inside the padding.
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&v| v < limit)
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.c_out * self.h_out * self.w_out];
        for n in 0..self.n {
            for o in 0..self.c_out {
                for oy in 0..self.h_out {
                    for ox in 0..self.w_out {
                        let mut s = 0.0;
                        for c in 0..self.c_in {
                            for u in 0..self.kh {
                                let Some(iy) = self.source(oy, u, self.h) else { continue };
                                for v in 0..self.kw {
                                    let Some(ix) = self.source(ox, v, self.w) else { continue };
                                    s += x[((n * self.c_in + c) * self.h + iy) * self.w + ix]
                                        * k[((o * self.c_in + c) * self.kh + u) * self.kw + v];
                                }
                            }
                        }
                        out[((n * self.c_out + o) * self.h_out + oy) * self.w_out + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        want_input: bool,
        want_kernel: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut dx = want_input.then(|| vec![0.0; x.len()]);
        let mut dk = want_kernel.then(|| vec![0.0; k.len()]);
        for n in 0..self.n {
            for o in 0..self.c_out {
                for oy in 0..self.h_out {
                    for ox in 0..self.w_out {
                        let gv = g[((n * self.c_out + o) * self.h_out + oy) * self.w_out + ox];
                        for c in 0..self.c_in {
                            for u in 0..self.kh {
                                let Some(iy) = self.source(oy, u, self.h) else { continue };
                                for v in 0..self.kw {
                                    let Some(ix) = self.source(ox, v, self.w) else { continue };
                                    let xi = ((n * self.c_in + c) * self.h + iy) * self.w + ix;
                                    let ki = ((o * self.c_in + c) * self.kh + u) * self.kw + v;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi] += gv * k[ki];
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        dk[ki] += gv * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dk)
    }
}
