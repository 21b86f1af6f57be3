//! Reverse-mode differentiation tape.
//!
//! A `Graph` records operations in insertion order (which is also a valid
//! topological order), holds every intermediate value, and replays the tape
//! backwards to produce exact gradients for trainable leaves.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation kinds recorded on the tape. Leaves carry no op.
#[derive(Debug, Clone)]
pub enum Op {
    Matmul,
    /// Elementwise add; rhs may be a rank-1 bias broadcast over leading axes.
    Add,
    Sub,
    /// Elementwise multiply; either side may be a single-element tensor
    /// broadcast over the other.
    Mul,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    /// Softmax over the last axis.
    Softmax,
    /// Layer normalization over the last axis; inputs (x, gamma, beta).
    LayerNorm { eps: f64 },
    /// Group normalization over (C, H, W); inputs (x, gamma, beta).
    GroupNorm { groups: usize, eps: f64 },
    /// Inputs (x: (Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout)).
    Conv2d { stride: usize, pad: usize },
    AvgPool2d { kernel: usize, stride: usize },
    /// Full reduction to a scalar; accumulates in f64.
    Mean,
    Sum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Rank-2 transpose.
    Transpose,
    /// Row lookup into a rank-2 table; also used to gather token rows.
    EmbedLookup { indices: Vec<usize> },
    /// Multiply by a compile-time constant.
    Scale { factor: f64 },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::GroupNorm { .. } => "groupnorm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<F: Scalar> {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor<F>,
    requires_grad: bool,
    trainable_leaf: bool,
}

/// Tape of recorded operations.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(None, vec![], value, false, false)
    }

    /// Trainable leaf; `backward` reports its gradient.
    pub fn parameter(&mut self, value: Tensor<F>) -> NodeId {
        self.push(None, vec![], value, true, true)
    }

    /// Frozen leaf: participates in the forward pass, excluded from gradients.
    pub fn frozen(&mut self, value: Tensor<F>) -> NodeId {
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(
        &mut self,
        op: Option<Op>,
        inputs: Vec<NodeId>,
        value: Tensor<F>,
        requires_grad: bool,
        trainable_leaf: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            trainable_leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record `op` applied to `inputs`. Validates shapes and computes the
    /// output value eagerly.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("input node {} not in graph", id.0)));
            }
        }
        let vals: Vec<&Tensor<F>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = compute(&op, &vals)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), out, requires_grad, false))
    }

    // Convenience wrappers used throughout the model code.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softplus, &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }
    pub fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, inputs)
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[x])
    }
    pub fn embed_lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::EmbedLookup { indices }, &[table])
    }
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    /// Reverse-mode gradients of `loss` with respect to every trainable leaf.
    /// Frozen and constant leaves receive no entry.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<NodeId, Tensor<F>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {} not in graph", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            if node.trainable_leaf {
                grads[idx] = Some(grad_out);
                continue;
            }
            let Some(op) = &node.op else {
                continue; // constant leaf
            };
            let in_vals: Vec<&Tensor<F>> =
                node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let want: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let in_grads = backprop(op, &in_vals, &self.nodes[idx].value, &grad_out, &want);
            for (slot, g) in node.inputs.iter().zip(in_grads) {
                if let Some(g) = g {
                    match &mut grads[slot.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        none => *none = Some(g),
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable_leaf {
                if let Some(g) = grads[idx].take() {
                    out.insert(NodeId(idx), g);
                }
            }
        }
        Ok(out)
    }
}

/// Row-major matmul with deterministic accumulation order. Parallelizes over
/// output rows; each element is still reduced sequentially, so results are
/// bitwise identical regardless of thread count.
pub fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    let work = m * n * k;
    let row_job = |i: usize, row: &mut [F]| {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if work >= 1 << 16 && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    out
}

fn gelu_val<F: Scalar>(x: F) -> F {
    // tanh approximation
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::ONE + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::ONE - t * t;
    half * (F::ONE + t) + half * x * sech2 * c * (F::ONE + three * a * x * x)
}

fn sigmoid_val<F: Scalar>(x: F) -> F {
    if x.to_f64() >= 0.0 {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

fn softplus_val<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x.to_f64() > 0.0 { x } else { F::ZERO };
    m + (F::ONE + (-x.abs()).exp()).ln()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = side + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn compute<F: Scalar>(op: &Op, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let arity_err = |n: usize| {
        Error::Graph(format!(
            "`{}` expects {n} inputs, got {}",
            op.name(),
            inputs.len()
        ))
    };
    match op {
        Op::Matmul => {
            let [a, b] = inputs else { return Err(arity_err(2)) };
            let (asr, bsr) = (a.shape(), b.shape());
            if asr.len() != 2 || bsr.len() != 2 || asr[1] != bsr[0] {
                return Err(Error::shape("matmul", format!("{asr:?} x {bsr:?}")));
            }
            let (m, k, n) = (asr[0], asr[1], bsr[1]);
            let data = matmul_raw(a.data(), b.data(), m, k, n);
            Ok(Tensor::from_vec(vec![m, n], data).unwrap())
        }
        Op::Add | Op::Sub => {
            let [a, b] = inputs else { return Err(arity_err(2)) };
            let sub = matches!(op, Op::Sub);
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| if sub { x - y } else { x + y })
                    .collect();
                Ok(Tensor::from_vec(a.shape().to_vec(), data).unwrap())
            } else if !sub && b.shape().len() == 1 && b.shape()[0] == last_dim(a.shape()) {
                // bias broadcast over leading axes
                let n = b.shape()[0];
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + b.data()[i % n])
                    .collect();
                Ok(Tensor::from_vec(a.shape().to_vec(), data).unwrap())
            } else {
                Err(Error::shape(
                    if sub { "sub" } else { "add" },
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ))
            }
        }
        Op::Mul => {
            let [a, b] = inputs else { return Err(arity_err(2)) };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                Ok(Tensor::from_vec(a.shape().to_vec(), data).unwrap())
            } else if b.numel() == 1 {
                let s = b.data()[0];
                Ok(a.map(|x| x * s))
            } else if a.numel() == 1 {
                let s = a.data()[0];
                Ok(b.map(|x| s * x))
            } else {
                Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        }
        Op::Relu => {
            let [x] = inputs else { return Err(arity_err(1)) };
            Ok(x.map(|v| if v.to_f64() > 0.0 { v } else { F::ZERO }))
        }
        Op::Gelu => {
            let [x] = inputs else { return Err(arity_err(1)) };
            Ok(x.map(gelu_val))
        }
        Op::Sigmoid => {
            let [x] = inputs else { return Err(arity_err(1)) };
            Ok(x.map(sigmoid_val))
        }
        Op::Softplus => {
            let [x] = inputs else { return Err(arity_err(1)) };
            Ok(x.map(softplus_val))
        }
        Op::Softmax => {
            let [x] = inputs else { return Err(arity_err(1)) };
            if x.shape().is_empty() {
                return Err(Error::shape("softmax", "rank-0 input"));
            }
            let n = last_dim(x.shape());
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let mut mx = row[0];
                for &v in row.iter() {
                    if v.to_f64() > mx.to_f64() {
                        mx = v;
                    }
                }
                let mut sum = F::ZERO;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            Ok(Tensor::from_vec(x.shape().to_vec(), data).unwrap())
        }
        Op::LayerNorm { eps } => {
            let [x, gamma, beta] = inputs else { return Err(arity_err(3)) };
            let n = last_dim(x.shape());
            if gamma.shape() != [n] || beta.shape() != [n] {
                return Err(Error::shape(
                    "layernorm",
                    format!(
                        "x {:?} needs gamma/beta of shape [{n}], got {:?}/{:?}",
                        x.shape(),
                        gamma.shape(),
                        beta.shape()
                    ),
                ));
            }
            let eps = F::from_f64(*eps);
            let nf = F::from_f64(n as f64);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let mut mu = F::ZERO;
                for &v in row.iter() {
                    mu += v;
                }
                mu = mu / nf;
                let mut var = F::ZERO;
                for &v in row.iter() {
                    let d = v - mu;
                    var += d * d;
                }
                var = var / nf;
                let inv = F::ONE / (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = gamma.data()[j] * ((*v - mu) * inv) + beta.data()[j];
                }
            }
            Ok(Tensor::from_vec(x.shape().to_vec(), data).unwrap())
        }
        Op::GroupNorm { groups, eps } => {
            let [x, gamma, beta] = inputs else { return Err(arity_err(3)) };
            let s = x.shape();
            if s.len() != 3 {
                return Err(Error::shape("groupnorm", format!("expected (C,H,W), got {s:?}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            if c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
                return Err(Error::shape(
                    "groupnorm",
                    format!("C={c}, groups={groups}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
                ));
            }
            let eps = F::from_f64(*eps);
            let gc = c / groups;
            let gn = gc * h * w;
            let gnf = F::from_f64(gn as f64);
            let mut data = x.data().to_vec();
            for g in 0..*groups {
                let span = g * gc * h * w..(g + 1) * gc * h * w;
                let slice = &mut data[span];
                let mut mu = F::ZERO;
                for &v in slice.iter() {
                    mu += v;
                }
                mu = mu / gnf;
                let mut var = F::ZERO;
                for &v in slice.iter() {
                    let d = v - mu;
                    var += d * d;
                }
                var = var / gnf;
                let inv = F::ONE / (var + eps).sqrt();
                for (i, v) in slice.iter_mut().enumerate() {
                    let ch = g * gc + i / (h * w);
                    *v = gamma.data()[ch] * ((*v - mu) * inv) + beta.data()[ch];
                }
            }
            Ok(Tensor::from_vec(s.to_vec(), data).unwrap())
        }
        Op::Conv2d { stride, pad } => {
            let [x, wt, b] = inputs else { return Err(arity_err(3)) };
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || b.shape() != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("x {xs:?}, w {ws:?}, b {:?}", b.shape()),
                ));
            }
            let (cin, h, w) = (xs[0], xs[1], xs[2]);
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            let (Some(ho), Some(wo)) = (
                conv_out_side(h, kh, *stride, *pad),
                conv_out_side(w, kw, *stride, *pad),
            ) else {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
                ));
            };
            let mut out = vec![F::ZERO; cout * ho * wo];
            let xd = x.data();
            let wd = wt.data();
            let bd = b.data();
            let chan_job = |co: usize, plane: &mut [F]| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[ci * h * w + iy as usize * w + ix as usize]
                                        * wd[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        plane[oy * wo + ox] = acc;
                    }
                }
            };
            if cout * ho * wo * cin * kh * kw >= 1 << 16 && cout > 1 {
                out.par_chunks_mut(ho * wo)
                    .enumerate()
                    .for_each(|(co, plane)| chan_job(co, plane));
            } else {
                for (co, plane) in out.chunks_mut(ho * wo).enumerate() {
                    chan_job(co, plane);
                }
            }
            Ok(Tensor::from_vec(vec![cout, ho, wo], out).unwrap())
        }
        Op::AvgPool2d { kernel, stride } => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let s = x.shape();
            if s.len() != 3 || s[1] < *kernel || s[2] < *kernel {
                return Err(Error::shape("avgpool2d", format!("input {s:?}, kernel {kernel}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let ho = (h - kernel) / stride + 1;
            let wo = (w - kernel) / stride + 1;
            let inv = F::from_f64(1.0 / ((kernel * kernel) as f64));
            let mut out = vec![F::ZERO; c * ho * wo];
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = F::ZERO;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                acc += x.data()
                                    [ci * h * w + (oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        out[ci * ho * wo + oy * wo + ox] = acc * inv;
                    }
                }
            }
            Ok(Tensor::from_vec(vec![c, ho, wo], out).unwrap())
        }
        Op::Mean | Op::Sum => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let mut acc = 0.0f64;
            for &v in x.data() {
                acc += v.to_f64();
            }
            if matches!(op, Op::Mean) {
                acc /= x.numel() as f64;
            }
            Ok(Tensor::scalar(F::from_f64(acc)))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::Graph("concat of zero inputs".into()));
            }
            let rank = inputs[0].shape().len();
            if *axis >= rank {
                return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
            }
            for t in inputs {
                if t.shape().len() != rank {
                    return Err(Error::shape("concat", "rank mismatch".to_string()));
                }
                for d in 0..rank {
                    if d != *axis && t.shape()[d] != inputs[0].shape()[d] {
                        return Err(Error::shape(
                            "concat",
                            format!("{:?} vs {:?} at axis {d}", t.shape(), inputs[0].shape()),
                        ));
                    }
                }
            }
            let mut out_shape = inputs[0].shape().to_vec();
            out_shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let ax = t.shape()[*axis];
                    let start = o * ax * inner;
                    data.extend_from_slice(&t.data()[start..start + ax * inner]);
                }
            }
            Ok(Tensor::from_vec(out_shape, data).unwrap())
        }
        Op::Slice { axis, start, len } => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let s = x.shape();
            if *axis >= s.len() || start + len > s[*axis] || *len == 0 {
                return Err(Error::shape(
                    "slice",
                    format!("axis {axis} [{start}..{}) of {s:?}", start + len),
                ));
            }
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let ax = s[*axis];
            let mut out_shape = s.to_vec();
            out_shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ax + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Ok(Tensor::from_vec(out_shape, data).unwrap())
        }
        Op::Transpose => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let s = x.shape();
            if s.len() != 2 {
                return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}")));
            }
            let (r, c) = (s[0], s[1]);
            let mut data = vec![F::ZERO; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Ok(Tensor::from_vec(vec![c, r], data).unwrap())
        }
        Op::EmbedLookup { indices } => {
            let [table] = inputs else { return Err(arity_err(1)) };
            let s = table.shape();
            if s.len() != 2 {
                return Err(Error::shape("embed_lookup", format!("table must be rank 2, got {s:?}")));
            }
            let (v, m) = (s[0], s[1]);
            let mut data = Vec::with_capacity(indices.len() * m);
            for &ix in indices {
                if ix >= v {
                    return Err(Error::shape("embed_lookup", format!("index {ix} >= {v}")));
                }
                data.extend_from_slice(&table.data()[ix * m..(ix + 1) * m]);
            }
            Ok(Tensor::from_vec(vec![indices.len(), m], data).unwrap())
        }
        Op::Scale { factor } => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let f = F::from_f64(*factor);
            Ok(x.map(|v| v * f))
        }
        Op::Reshape { shape } => {
            let [x] = inputs else { return Err(arity_err(1)) };
            let numel: usize = shape.iter().product();
            if numel != x.numel() || shape.iter().any(|&e| e == 0) {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} ({} elems) -> {shape:?}", x.shape(), x.numel()),
                ));
            }
            Ok(Tensor::from_vec(shape.clone(), x.data().to_vec()).unwrap())
        }
    }
}

/// Vector-Jacobian products per op. `want[i]` is false when input `i` does
/// not require a gradient; those slots return `None`.
fn backprop<F: Scalar>(
    op: &Op,
    inputs: &[&Tensor<F>],
    output: &Tensor<F>,
    grad_out: &Tensor<F>,
    want: &[bool],
) -> Vec<Option<Tensor<F>>> {
    match op {
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = want[0].then(|| {
                // dA = dC * B^T
                let bt = transpose_raw(b.data(), k, n);
                Tensor::from_vec(vec![m, k], matmul_raw(grad_out.data(), &bt, m, n, k)).unwrap()
            });
            let db = want[1].then(|| {
                let at = transpose_raw(a.data(), m, k);
                Tensor::from_vec(vec![k, n], matmul_raw(&at, grad_out.data(), k, m, n)).unwrap()
            });
            vec![da, db]
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = want[0].then(|| grad_out.clone());
            let db = want[1].then(|| {
                if a.shape() == b.shape() {
                    grad_out.clone()
                } else {
                    let n = b.shape()[0];
                    let mut g = vec![F::ZERO; n];
                    for (i, &v) in grad_out.data().iter().enumerate() {
                        g[i % n] += v;
                    }
                    Tensor::from_vec(vec![n], g).unwrap()
                }
            });
            vec![da, db]
        }
        Op::Sub => {
            let da = want[0].then(|| grad_out.clone());
            let db = want[1].then(|| grad_out.map(|v| -v));
            vec![da, db]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let grad_for = |this: &Tensor<F>, other: &Tensor<F>| {
                if this.numel() == other.numel() || other.numel() == 1 {
                    // elementwise (other broadcast if scalar)
                    if other.numel() == 1 {
                        let s = other.data()[0];
                        grad_out.map(|v| v * s)
                    } else {
                        let data = grad_out
                            .data()
                            .iter()
                            .zip(other.data())
                            .map(|(&g, &o)| g * o)
                            .collect();
                        Tensor::from_vec(this.shape().to_vec(), data).unwrap()
                    }
                } else {
                    // this is the broadcast scalar
                    let mut acc = F::ZERO;
                    for (&g, &o) in grad_out.data().iter().zip(other.data()) {
                        acc += g * o;
                    }
                    Tensor::from_vec(this.shape().to_vec(), vec![acc]).unwrap()
                }
            };
            vec![
                want[0].then(|| grad_for(a, b)),
                want[1].then(|| grad_for(b, a)),
            ]
        }
        Op::Relu => {
            let x = inputs[0];
            let data = grad_out
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v.to_f64() > 0.0 { g } else { F::ZERO })
                .collect();
            vec![Some(Tensor::from_vec(x.shape().to_vec(), data).unwrap())]
        }
        Op::Gelu => {
            let x = inputs[0];
            let data = grad_out
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| g * gelu_grad(v))
                .collect();
            vec![Some(Tensor::from_vec(x.shape().to_vec(), data).unwrap())]
        }
        Op::Sigmoid => {
            let data = grad_out
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &s)| g * s * (F::ONE - s))
                .collect();
            vec![Some(Tensor::from_vec(output.shape().to_vec(), data).unwrap())]
        }
        Op::Softplus => {
            let x = inputs[0];
            let data = grad_out
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| g * sigmoid_val(v))
                .collect();
            vec![Some(Tensor::from_vec(x.shape().to_vec(), data).unwrap())]
        }
        Op::Softmax => {
            let n = last_dim(output.shape());
            let mut data = vec![F::ZERO; output.numel()];
            for (row, (y, dy)) in output
                .data()
                .chunks(n)
                .zip(grad_out.data().chunks(n))
                .enumerate()
            {
                // reborrow trick: chunks zipped above
                let _ = row;
                let (y, dy) = (y, dy);
                let mut dot = F::ZERO;
                for (yv, dv) in y.iter().zip(dy) {
                    dot += *yv * *dv;
                }
                let base = row * n;
                for j in 0..n {
                    data[base + j] = y[j] * (dy[j] - dot);
                }
            }
            vec![Some(Tensor::from_vec(output.shape().to_vec(), data).unwrap())]
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let n = last_dim(x.shape());
            let rows = x.numel() / n;
            let eps = F::from_f64(*eps);
            let nf = F::from_f64(n as f64);
            let mut dx = vec![F::ZERO; x.numel()];
            let mut dgamma = vec![F::ZERO; n];
            let mut dbeta = vec![F::ZERO; n];
            for r in 0..rows {
                let xr = &x.data()[r * n..(r + 1) * n];
                let dyr = &grad_out.data()[r * n..(r + 1) * n];
                let mut mu = F::ZERO;
                for &v in xr {
                    mu += v;
                }
                mu = mu / nf;
                let mut var = F::ZERO;
                for &v in xr {
                    let d = v - mu;
                    var += d * d;
                }
                var = var / nf;
                let inv = F::ONE / (var + eps).sqrt();
                let xhat: Vec<F> = xr.iter().map(|&v| (v - mu) * inv).collect();
                let mut m1 = F::ZERO; // mean of dxhat
                let mut m2 = F::ZERO; // mean of dxhat * xhat
                let dxhat: Vec<F> = dyr
                    .iter()
                    .zip(gamma.data())
                    .map(|(&g, &ga)| g * ga)
                    .collect();
                for j in 0..n {
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                    dgamma[j] += dyr[j] * xhat[j];
                    dbeta[j] += dyr[j];
                }
                m1 = m1 / nf;
                m2 = m2 / nf;
                for j in 0..n {
                    dx[r * n + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![
                want[0].then(|| Tensor::from_vec(x.shape().to_vec(), dx).unwrap()),
                want[1].then(|| Tensor::from_vec(vec![n], dgamma).unwrap()),
                want[2].then(|| Tensor::from_vec(vec![n], dbeta).unwrap()),
            ]
        }
        Op::GroupNorm { groups, eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let s = x.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let gc = c / groups;
            let gn = gc * h * w;
            let gnf = F::from_f64(gn as f64);
            let eps = F::from_f64(*eps);
            let mut dx = vec![F::ZERO; x.numel()];
            let mut dgamma = vec![F::ZERO; c];
            let mut dbeta = vec![F::ZERO; c];
            for g in 0..*groups {
                let span = g * gn..(g + 1) * gn;
                let xr = &x.data()[span.clone()];
                let dyr = &grad_out.data()[span.clone()];
                let mut mu = F::ZERO;
                for &v in xr {
                    mu += v;
                }
                mu = mu / gnf;
                let mut var = F::ZERO;
                for &v in xr {
                    let d = v - mu;
                    var += d * d;
                }
                var = var / gnf;
                let inv = F::ONE / (var + eps).sqrt();
                let mut m1 = F::ZERO;
                let mut m2 = F::ZERO;
                let mut xhat = vec![F::ZERO; gn];
                let mut dxhat = vec![F::ZERO; gn];
                for i in 0..gn {
                    let ch = g * gc + i / (h * w);
                    xhat[i] = (xr[i] - mu) * inv;
                    dxhat[i] = dyr[i] * gamma.data()[ch];
                    m1 += dxhat[i];
                    m2 += dxhat[i] * xhat[i];
                    dgamma[ch] += dyr[i] * xhat[i];
                    dbeta[ch] += dyr[i];
                }
                m1 = m1 / gnf;
                m2 = m2 / gnf;
                for i in 0..gn {
                    dx[g * gn + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            vec![
                want[0].then(|| Tensor::from_vec(s.to_vec(), dx).unwrap()),
                want[1].then(|| Tensor::from_vec(vec![c], dgamma).unwrap()),
                want[2].then(|| Tensor::from_vec(vec![c], dbeta).unwrap()),
            ]
        }
        Op::Conv2d { stride, pad } => {
            let (x, wt) = (inputs[0], inputs[1]);
            let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
            let (ho, wo) = (output.shape()[1], output.shape()[2]);
            let go = grad_out.data();
            let dx = want[0].then(|| {
                let mut dx = vec![F::ZERO; x.numel()];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = go[co * ho * wo + oy * wo + ox];
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[ci * h * w + iy as usize * w + ix as usize] +=
                                            g * wt.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(x.shape().to_vec(), dx).unwrap()
            });
            let dw = want[1].then(|| {
                let mut dw = vec![F::ZERO; wt.numel()];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = go[co * ho * wo + oy * wo + ox];
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dw[((co * cin + ci) * kh + ky) * kw + kx] +=
                                            g * x.data()[ci * h * w + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(wt.shape().to_vec(), dw).unwrap()
            });
            let db = want[2].then(|| {
                let mut db = vec![F::ZERO; cout];
                for co in 0..cout {
                    for v in &go[co * ho * wo..(co + 1) * ho * wo] {
                        db[co] += *v;
                    }
                }
                Tensor::from_vec(vec![cout], db).unwrap()
            });
            vec![dx, dw, db]
        }
        Op::AvgPool2d { kernel, stride } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (output.shape()[1], output.shape()[2]);
            let inv = F::from_f64(1.0 / ((kernel * kernel) as f64));
            let mut dx = vec![F::ZERO; x.numel()];
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = grad_out.data()[ci * ho * wo + oy * wo + ox] * inv;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                dx[ci * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(x.shape().to_vec(), dx).unwrap())]
        }
        Op::Mean => {
            let x = inputs[0];
            let g = grad_out.scalar_value() * F::from_f64(1.0 / x.numel() as f64);
            vec![Some(Tensor::full(x.shape(), g))]
        }
        Op::Sum => {
            let x = inputs[0];
            vec![Some(Tensor::full(x.shape(), grad_out.scalar_value()))]
        }
        Op::Concat { axis } => {
            let out_shape = output.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_ax = out_shape[*axis];
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0usize;
            for (t, &wanted) in inputs.iter().zip(want) {
                let ax = t.shape()[*axis];
                if wanted {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total_ax + offset) * inner;
                        g.extend_from_slice(&grad_out.data()[base..base + ax * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(t.shape().to_vec(), g).unwrap()));
                } else {
                    grads.push(None);
                }
                offset += ax;
            }
            grads
        }
        Op::Slice { axis, start, len } => {
            let x = inputs[0];
            let s = x.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let ax = s[*axis];
            let mut dx = vec![F::ZERO; x.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * ax + start) * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&grad_out.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::from_vec(s.to_vec(), dx).unwrap())]
        }
        Op::Transpose => {
            let (r, c) = (output.shape()[0], output.shape()[1]);
            let data = transpose_raw(grad_out.data(), r, c);
            vec![Some(Tensor::from_vec(vec![c, r], data).unwrap())]
        }
        Op::EmbedLookup { indices } => {
            let table = inputs[0];
            let m = table.shape()[1];
            let mut dt = vec![F::ZERO; table.numel()];
            for (row, &ix) in indices.iter().enumerate() {
                for j in 0..m {
                    dt[ix * m + j] += grad_out.data()[row * m + j];
                }
            }
            vec![Some(Tensor::from_vec(table.shape().to_vec(), dt).unwrap())]
        }
        Op::Scale { factor } => {
            let f = F::from_f64(*factor);
            vec![Some(grad_out.map(|v| v * f))]
        }
        Op::Reshape { .. } => {
            let x = inputs[0];
            vec![Some(
                Tensor::from_vec(x.shape().to_vec(), grad_out.data().to_vec()).unwrap(),
            )]
        }
    }
}

fn transpose_raw<F: Scalar>(a: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
