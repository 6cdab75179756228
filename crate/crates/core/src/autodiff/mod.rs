//! Reverse-mode differentiation over an append-only graph of dense tensors.
//!
//! Nodes are appended in evaluation order and identified by [`Var`]. The
//! backward pass walks nodes in exact reverse insertion order and
//! accumulates each node's input gradients in a fixed argument order, so two
//! runs over the same inputs produce bit-identical gradients.
//!
//! Every op checks its output for NaN/infinity and fails with
//! [`Error::NonFinite`] naming the offending node.

mod conv;
mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::conv_output_extent;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough {
        features: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax(..) => "softmax",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L1Loss(..) => "l1_loss",
            Op::MseLoss(..) => "mse_loss",
            Op::GatherRows { .. } => "gather_rows",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only computation graph. Single-threaded; values may be read
/// from other threads once building is finished.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Stop-gradient: a constant copy of `x`'s current value.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Number of nodes created by the named op, e.g. `"softmax"`.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = kernels::map(self.value(x), |v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = kernels::map(self.value(x), |v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = kernels::map(self.value(x), |v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::map(self.value(x), kernels::gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = kernels::map(self.value(x), kernels::softplus);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), m, n);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(x), rg)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", s.len()),
            ));
        }
        let out = kernels::permute(self.value(x), perm);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let out = kernels::narrow(self.value(x), axis, start, len);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Narrow { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::invalid("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&parts, axis);
        let rg = self.any_grad(xs);
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    // ---------------------------------------------------------------- convolution

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::Geometry::for_conv(self.shape(x), self.shape(w), stride, pad)?;
        let out = geom.gather(self.value(x).data(), self.value(w).data());
        let rg = self.any_grad(&[x, w]);
        self.push(
            Tensor::from_parts(geom.low_shape(), out),
            Op::Conv2d { x, w, stride, pad },
            rg,
        )
    }

    /// Adjoint of [`Graph::conv2d`]: `x: [B,I,h,w]`, `w: [I,O,kh,kw]`,
    /// output extent `(h-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::Geometry::for_transpose(self.shape(x), self.shape(w), stride, pad)?;
        let out = geom.scatter(self.value(x).data(), self.value(w).data());
        let rg = self.any_grad(&[x, w]);
        self.push(
            Tensor::from_parts(geom.high_shape(), out),
            Op::ConvTranspose2d { x, w, stride, pad },
            rg,
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B,C,...]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::shape("channel_bias", sx, sb));
        }
        let out = kernels::channel_bias(self.value(x), self.value(bias).data());
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::ChannelBias { x, bias }, rg)
    }

    // ---------------------------------------------------------------- normalization & reductions

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| Error::invalid("layernorm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layernorm", sx, self.shape(p)));
            }
        }
        let (out, xhat, inv_std) = kernels::layernorm(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).is_empty() {
            return Err(Error::invalid("softmax", "scalar input"));
        }
        let out = kernels::softmax(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("l1_loss", ta.shape(), tb.shape()));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let v = s / ta.numel() as f64;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(v), Op::L1Loss(a, b), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse_loss", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = s / ta.numel() as f64;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(v), Op::MseLoss(a, b), rg)
    }

    // ---------------------------------------------------------------- quantization support

    /// Rows `table[indices[i]]` of a `[K,d]` table, stacked into `[N,d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("table must be 2-D, got {s:?}")));
        }
        let (k, d) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of range {k}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        self.push(
            Tensor::from_parts(vec![indices.len(), d], data),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Forward value of `quantized`, gradient copied unchanged onto
    /// `features`. `quantized` itself receives nothing through this node.
    pub fn straight_through(&mut self, features: Var, quantized: Var) -> Result<Var> {
        if self.shape(features) != self.shape(quantized) {
            return Err(Error::shape(
                "straight_through",
                self.shape(features),
                self.shape(quantized),
            ));
        }
        let out = self.value(quantized).clone();
        let rg = self.any_grad(&[features]);
        self.push(out, Op::StraightThrough { features }, rg)
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every `requires_grad` leaf. Calling
    /// again without [`Graph::zero_grad`] adds to the stored gradients.
    /// Leaves that do not influence `loss` get a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let mut adj = self.adjoints(loss, 0, &[])?;
        for (i, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let contribution = adj[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match &mut node.grad {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(&contribution) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), contribution))
                }
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to `targets`, without touching the
    /// stored leaf gradients. The reverse sweep stops at the earliest
    /// target, so gradients for late nodes are cheap.
    pub fn gradients_wrt(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor>> {
        let stop = targets.iter().map(|v| v.0).min().unwrap_or(loss.0);
        let adj = self.adjoints(loss, stop, targets)?;
        Ok(targets
            .iter()
            .map(|&t| {
                let shape = self.shape(t).to_vec();
                match &adj[t.0] {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn adjoints(&self, loss: Var, stop: usize, keep: &[Var]) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (stop..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.name(),
                });
            }
            self.propagate(id, &g, &mut adj);
            if keep.contains(&Var(id)) {
                adj[id] = Some(g);
            }
        }
        Ok(adj)
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let c = kernels::reduce_broadcast(g, self.value(v).numel());
                        self.accumulate(adj, v, c);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let c = kernels::reduce_broadcast(g, self.value(*a).numel());
                    self.accumulate(adj, *a, c);
                }
                if self.wants(*b) {
                    let mut c = kernels::reduce_broadcast(g, self.value(*b).numel());
                    c.iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(adj, *b, c);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let c = kernels::mul_grad(g, vb, va.len());
                    self.accumulate(adj, *a, c);
                }
                if self.wants(*b) {
                    let c = kernels::mul_grad(g, va, vb.len());
                    self.accumulate(adj, *b, c);
                }
            }
            Op::Scale(x, f) => {
                let c = g.iter().map(|v| v * f).collect();
                self.accumulate(adj, *x, c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.accumulate(adj, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    self.accumulate(adj, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                self.accumulate(adj, *x, kernels::transpose(g, s[1], s[0]));
            }
            Op::Permute(x, perm) => {
                let c = kernels::permute_grad(self.value(*x).shape(), perm, g);
                self.accumulate(adj, *x, c);
            }
            Op::Narrow { x, axis, start } => {
                let c = kernels::narrow_grad(self.shape(*x), &node.value, *axis, *start, g);
                self.accumulate(adj, *x, c);
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                let parts = kernels::concat_grad(&shapes, *axis, g);
                for (&v, c) in xs.iter().zip(parts) {
                    self.accumulate(adj, v, c);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geom = conv::Geometry::for_conv(self.shape(*x), self.shape(*w), *stride, *pad)
                    .expect("validated in forward");
                if self.wants(*x) {
                    self.accumulate(adj, *x, geom.scatter(g, self.value(*w).data()));
                }
                if self.wants(*w) {
                    self.accumulate(adj, *w, geom.weight_grad(g, self.value(*x).data()));
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let geom =
                    conv::Geometry::for_transpose(self.shape(*x), self.shape(*w), *stride, *pad)
                        .expect("validated in forward");
                if self.wants(*x) {
                    self.accumulate(adj, *x, geom.gather(g, self.value(*w).data()));
                }
                if self.wants(*w) {
                    self.accumulate(adj, *w, geom.weight_grad(self.value(*x).data(), g));
                }
            }
            Op::ChannelBias { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(adj, *x, g.to_vec());
                }
                if self.wants(*bias) {
                    let c = kernels::channel_bias_grad(self.shape(*x), g);
                    self.accumulate(adj, *bias, c);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (gx, ggain, gbias) = kernels::layernorm_grad(g, xhat, inv_std, gv);
                if self.wants(*x) {
                    self.accumulate(adj, *x, gx);
                }
                if self.wants(*gain) {
                    self.accumulate(adj, *gain, ggain);
                }
                if self.wants(*bias) {
                    self.accumulate(adj, *bias, gbias);
                }
            }
            Op::Softmax(x) => {
                let c = kernels::softmax_grad(&node.value, g);
                self.accumulate(adj, *x, c);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let c = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(adj, *x, c);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let c = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect();
                self.accumulate(adj, *x, c);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let c = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * kernels::gelu_derivative(x))
                    .collect();
                self.accumulate(adj, *x, c);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let c = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * kernels::sigmoid(x))
                    .collect();
                self.accumulate(adj, *x, c);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(adj, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(adj, *x, vec![g[0] / n as f64; n]);
            }
            Op::L1Loss(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / va.len() as f64;
                let ga: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    let gb = ga.iter().map(|v| -v).collect();
                    self.accumulate(adj, *a, ga);
                    self.accumulate(adj, *b, gb);
                } else {
                    self.accumulate(adj, *a, ga);
                }
            }
            Op::MseLoss(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / va.len() as f64;
                let ga: Vec<f64> = va.iter().zip(vb).map(|(x, y)| scale * (x - y)).collect();
                if self.wants(*b) {
                    let gb = ga.iter().map(|v| -v).collect();
                    self.accumulate(adj, *a, ga);
                    self.accumulate(adj, *b, gb);
                } else {
                    self.accumulate(adj, *a, ga);
                }
            }
            Op::GatherRows { table, indices } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut c = vec![0.0; s[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        c[i * d + j] += g[row * d + j];
                    }
                }
                self.accumulate(adj, *table, c);
            }
            Op::StraightThrough { features } => self.accumulate(adj, *features, g.to_vec()),
        }
    }
}
