//! Reverse-mode autodiff on a flat tape.
//!
//! Every op appends one node holding the materialized output tensor plus
//! enough bookkeeping to replay its backward kernel. `backward` walks the
//! tape once in reverse insertion order, which is a valid topological
//! order because ops can only reference earlier nodes.

use std::cell::{Cell, RefCell};

use crate::scalar::Scalar;

use super::{kernels, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful with the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F: Scalar> {
    value: Tensor<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
    op: Op<F>,
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    /// Multiply by a constant tensor (dropout masks, label smoothing).
    MulConst(usize, Tensor<F>),
    Scale(usize, F),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    DepthwiseConv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    AvgPool2d {
        x: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        eps: f64,
    },
    Gelu(usize),
    Reshape(usize),
    Transpose(usize, usize, usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    SumAll(usize),
    /// -Σ target ⊙ log_softmax(logits); target is a probability vector.
    SoftmaxXent {
        logits: usize,
        target: Tensor<F>,
    },
    /// Mean over classes of binary cross entropy on logits.
    BceLogits {
        logits: usize,
        target: Tensor<F>,
    },
}

pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: Cell<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// When enabled, every op verifies its output is finite and fails
    /// fast with the op name. Costs one extra pass per op, so it's off
    /// by default and switched on by the trainer's divergence guard.
    pub fn check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register an input tensor. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            needs_grad: t.needs_grad(),
            value: t.clone(),
            grad: None,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient computed by the last `backward`, if this node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad.as_ref().map(|g| {
            Tensor::from_vec(n.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    fn push(&self, op: &'static str, value: Tensor<F>, needs_grad: bool, node_op: Op<F>) -> Result<Var> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            grad: None,
            op: node_op,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    // ── arithmetic ───────────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (data, shape) =
            kernels::broadcast_binop("add", va.data(), va.shape(), vb.data(), vb.shape(), |x, y| {
                x + y
            })?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", Tensor::from_vec(shape, data)?, needs, Op::Add(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (data, shape) =
            kernels::broadcast_binop("mul", va.data(), va.shape(), vb.data(), vb.shape(), |x, y| {
                x * y
            })?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", Tensor::from_vec(shape, data)?, needs, Op::Mul(a.0, b.0))
    }

    /// x ⊙ c for a constant tensor c (no gradient flows into c).
    pub fn mul_const(&self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let vx = self.value(x);
        let (data, shape) =
            kernels::broadcast_binop("mul_const", vx.data(), vx.shape(), c.data(), c.shape(), |a, b| {
                a * b
            })?;
        let needs = self.needs(x);
        self.push(
            "mul_const",
            Tensor::from_vec(shape, data)?,
            needs,
            Op::MulConst(x.0, c.clone()),
        )
    }

    pub fn scale(&self, x: Var, c: F) -> Result<Var> {
        let vx = self.value(x);
        let data: Vec<F> = vx.data().iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(
            "scale",
            Tensor::from_vec(vx.shape().to_vec(), data)?,
            needs,
            Op::Scale(x.0, c),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, F::zero() - F::one())?;
        self.add(a, nb)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (data, shape) = kernels::matmul(va.data(), va.shape(), vb.data(), vb.shape())?;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_vec(shape, data)?, needs, Op::Matmul(a.0, b.0))
    }

    /// x·W + b with x (…, in), W (in, out), b (out).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ── convolutions and pooling ─────────────────────────────────────

    /// x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout) → (Cout,H',W').
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape().to_vec(), vw.shape().to_vec());
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if vb.numel() != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ws,
                rhs: vb.shape().to_vec(),
            });
        }
        let (data, oh, ow) = kernels::conv2d(
            vx.data(),
            xs[0],
            xs[1],
            xs[2],
            vw.data(),
            ws[0],
            ws[2],
            ws[3],
            vb.data(),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv2d",
            Tensor::from_vec(vec![ws[0], oh, ow], data)?,
            needs,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// x (C,H,W), w (C,kh,kw), b (C) → (C,H',W'). One filter per channel.
    pub fn depthwise_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape().to_vec(), vw.shape().to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[0] != ws[0] || vb.numel() != xs[0] {
            return Err(TensorError::ShapeMismatch { op: "depthwise_conv2d", lhs: xs, rhs: ws });
        }
        let (data, oh, ow) = kernels::depthwise_conv2d(
            vx.data(),
            xs[0],
            xs[1],
            xs[2],
            vw.data(),
            ws[1],
            ws[2],
            vb.data(),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "depthwise_conv2d",
            Tensor::from_vec(vec![xs[0], oh, ow], data)?,
            needs,
            Op::DepthwiseConv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// Parameter-free average pooling of x (C,H,W).
    pub fn avg_pool2d(
        &self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        if xs.len() != 3 {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("expected rank 3, got {:?}", xs),
            });
        }
        let (data, oh, ow) =
            kernels::avg_pool2d(vx.data(), xs[0], xs[1], xs[2], kernel, stride, pad)?;
        let needs = self.needs(x);
        self.push(
            "avg_pool2d",
            Tensor::from_vec(vec![xs[0], oh, ow], data)?,
            needs,
            Op::AvgPool2d { x: x.0, kernel, stride, pad },
        )
    }

    // ── normalization and activations ────────────────────────────────

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: vx.rank() });
        }
        let data = kernels::softmax(vx.data(), vx.shape(), axis);
        let needs = self.needs(x);
        self.push(
            "softmax",
            Tensor::from_vec(vx.shape().to_vec(), data)?,
            needs,
            Op::Softmax { x: x.0, axis },
        )
    }

    /// Layer norm over the last axis; gain and shift have that extent.
    pub fn layernorm(&self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vs) = (self.value(x), self.value(gain), self.value(shift));
        let n = *vx.shape().last().ok_or(TensorError::Invalid {
            op: "layernorm",
            msg: "input must have rank >= 1".into(),
        })?;
        if vg.numel() != n || vs.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let data = kernels::layernorm(vx.data(), vx.shape(), vg.data(), vs.data(), eps);
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            "layernorm",
            Tensor::from_vec(vx.shape().to_vec(), data)?,
            needs,
            Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, eps },
        )
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = kernels::gelu(vx.data());
        let needs = self.needs(x);
        self.push("gelu", Tensor::from_vec(vx.shape().to_vec(), data)?, needs, Op::Gelu(x.0))
    }

    // ── movement ─────────────────────────────────────────────────────

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let new: usize = shape.iter().product();
        if new != vx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape,
            });
        }
        let needs = self.needs(x);
        self.push("reshape", vx.reshaped(shape)?, needs, Op::Reshape(x.0))
    }

    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        if a >= rank || b >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let (data, shape) = kernels::transpose(vx.data(), vx.shape(), a, b);
        let needs = self.needs(x);
        self.push(
            "transpose",
            Tensor::from_vec(shape, data)?,
            needs,
            Op::Transpose(x.0, a, b),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.value(parts[0]);
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank });
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            let vs = self.shape_of(*p);
            if vs.len() != rank
                || vs
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: out_shape, rhs: vs });
            }
            out_shape[axis] += vs[axis];
        }
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let outer: usize = first.shape()[..axis].iter().product();
        let mut data = vec![F::zero(); out_shape.iter().product()];
        let out_lane = out_shape[axis] * inner;
        let mut off = 0usize;
        for p in parts {
            let v = self.value(*p);
            let lane = v.shape()[axis] * inner;
            for o in 0..outer {
                data[o * out_lane + off..o * out_lane + off + lane]
                    .copy_from_slice(&v.data()[o * lane..(o + 1) * lane]);
            }
            off += lane;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            "concat",
            Tensor::from_vec(out_shape, data)?,
            needs,
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
        )
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "narrow", axis, rank });
        }
        if start + len > vx.shape()[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "slice {}..{} out of extent {}",
                    start,
                    start + len,
                    vx.shape()[axis]
                ),
            });
        }
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let outer: usize = vx.shape()[..axis].iter().product();
        let src_lane = vx.shape()[axis] * inner;
        let dst_lane = len * inner;
        let mut data = vec![F::zero(); outer * dst_lane];
        for o in 0..outer {
            let s = o * src_lane + start * inner;
            data[o * dst_lane..(o + 1) * dst_lane].copy_from_slice(&vx.data()[s..s + dst_lane]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let needs = self.needs(x);
        self.push(
            "narrow",
            Tensor::from_vec(shape, data)?,
            needs,
            Op::Narrow { x: x.0, axis, start },
        )
    }

    /// Split along `axis` into equal chunks.
    pub fn chunk(&self, x: Var, axis: usize, chunks: usize) -> Result<Vec<Var>> {
        let extent = self.shape_of(x)[axis];
        if chunks == 0 || extent % chunks != 0 {
            return Err(TensorError::Invalid {
                op: "chunk",
                msg: format!("extent {extent} not divisible into {chunks} chunks"),
            });
        }
        let len = extent / chunks;
        (0..chunks).map(|i| self.narrow(x, axis, i * len, len)).collect()
    }

    // ── reductions and losses ────────────────────────────────────────

    /// Sum of all elements → rank-0 scalar.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut acc = F::zero();
        for &v in vx.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(acc), needs, Op::SumAll(x.0))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Cross entropy against a probability vector (soft labels welcome;
    /// mixup produces them). Returns a rank-0 scalar.
    pub fn softmax_cross_entropy(&self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        // log-sum-exp with max subtraction
        let data = vl.data();
        let mut m = data[0];
        for &v in data {
            if v > m {
                m = v;
            }
        }
        let mut lse = F::zero();
        for &v in data {
            lse = lse + (v - m).exp();
        }
        let lse = lse.ln() + m;
        let mut loss = F::zero();
        for (&z, &t) in data.iter().zip(target.data()) {
            loss = loss + t * (lse - z);
        }
        let needs = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            needs,
            Op::SoftmaxXent { logits: logits.0, target: target.clone() },
        )
    }

    /// Mean over classes of BCE with logits: mean(softplus(z) − t·z).
    /// Returns a rank-0 scalar.
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vl.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = vl.numel();
        let mut loss = F::zero();
        for (&z, &t) in vl.data().iter().zip(target.data()) {
            // softplus(z) = max(z,0) + ln(1 + exp(-|z|)), stable both ways
            let zp = if z > F::zero() { z } else { F::zero() };
            let softplus = zp + (F::one() + (-z.abs()).exp()).ln();
            loss = loss + softplus - t * z;
        }
        loss = loss * F::from_f64(1.0 / n as f64);
        let needs = self.needs(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            needs,
            Op::BceLogits { logits: logits.0, target: target.clone() },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every node
    /// that needs them and are fetched with [`Tape::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.0].value.shape().to_vec(),
            });
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if nodes[i].grad.is_none() || !nodes[i].needs_grad {
                continue;
            }
            let grad = nodes[i].grad.clone().expect("checked above");
            // Split borrows: read inputs immutably via raw indexing while
            // accumulating into (distinct, earlier) nodes.
            macro_rules! val {
                ($j:expr) => {
                    nodes[$j].value.clone()
                };
            }
            macro_rules! acc {
                ($j:expr, $delta:expr) => {{
                    let j = $j;
                    if nodes[j].needs_grad {
                        let delta = $delta;
                        match &mut nodes[j].grad {
                            Some(g) => {
                                for (a, b) in g.iter_mut().zip(&delta) {
                                    *a = *a + *b;
                                }
                            }
                            slot @ None => *slot = Some(delta),
                        }
                    }
                }};
            }
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (sa, sb) = (val!(*a).shape().to_vec(), val!(*b).shape().to_vec());
                    let out_shape = nodes[i].value.shape().to_vec();
                    acc!(*a, kernels::reduce_to_shape(&grad, &out_shape, &sa));
                    acc!(*b, kernels::reduce_to_shape(&grad, &out_shape, &sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val!(*a), val!(*b));
                    let out_shape = nodes[i].value.shape().to_vec();
                    if nodes[*a].needs_grad {
                        let (gb, _) = kernels::broadcast_binop(
                            "mul_bwd",
                            &grad,
                            &out_shape,
                            vb.data(),
                            vb.shape(),
                            |g, y| g * y,
                        )?;
                        acc!(*a, kernels::reduce_to_shape(&gb, &out_shape, va.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let (ga, _) = kernels::broadcast_binop(
                            "mul_bwd",
                            &grad,
                            &out_shape,
                            va.data(),
                            va.shape(),
                            |g, x| g * x,
                        )?;
                        acc!(*b, kernels::reduce_to_shape(&ga, &out_shape, vb.shape()));
                    }
                }
                Op::MulConst(x, c) => {
                    let vx = val!(*x);
                    let out_shape = nodes[i].value.shape().to_vec();
                    let (gx, _) = kernels::broadcast_binop(
                        "mul_const_bwd",
                        &grad,
                        &out_shape,
                        c.data(),
                        c.shape(),
                        |g, y| g * y,
                    )?;
                    acc!(*x, kernels::reduce_to_shape(&gx, &out_shape, vx.shape()));
                }
                Op::Scale(x, c) => {
                    acc!(*x, grad.iter().map(|&g| g * *c).collect::<Vec<F>>());
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (val!(*a), val!(*b));
                    let (da, db) = kernels::matmul_backward(
                        &grad,
                        va.data(),
                        va.shape(),
                        vb.data(),
                        vb.shape(),
                    );
                    acc!(*a, da);
                    acc!(*b, db);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (vx, vw) = (val!(*x), val!(*w));
                    let (xs, ws) = (vx.shape().to_vec(), vw.shape().to_vec());
                    let os = nodes[i].value.shape().to_vec();
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &grad,
                        vx.data(),
                        xs[0],
                        xs[1],
                        xs[2],
                        vw.data(),
                        ws[0],
                        ws[2],
                        ws[3],
                        *stride,
                        *pad,
                        os[1],
                        os[2],
                    );
                    acc!(*x, dx);
                    acc!(*w, dw);
                    acc!(*b, db);
                }
                Op::DepthwiseConv2d { x, w, b, stride, pad } => {
                    let (vx, vw) = (val!(*x), val!(*w));
                    let (xs, ws) = (vx.shape().to_vec(), vw.shape().to_vec());
                    let os = nodes[i].value.shape().to_vec();
                    let (dx, dw, db) = kernels::depthwise_conv2d_backward(
                        &grad,
                        vx.data(),
                        xs[0],
                        xs[1],
                        xs[2],
                        vw.data(),
                        ws[1],
                        ws[2],
                        *stride,
                        *pad,
                        os[1],
                        os[2],
                    );
                    acc!(*x, dx);
                    acc!(*w, dw);
                    acc!(*b, db);
                }
                Op::AvgPool2d { x, kernel, stride, pad } => {
                    let xs = val!(*x).shape().to_vec();
                    let os = nodes[i].value.shape().to_vec();
                    let dx = kernels::avg_pool2d_backward(
                        &grad, xs[0], xs[1], xs[2], *kernel, *stride, *pad, os[1], os[2],
                    );
                    acc!(*x, dx);
                }
                Op::Softmax { x, axis } => {
                    let y = nodes[i].value.clone();
                    let dx = kernels::softmax_backward(&grad, y.data(), y.shape(), *axis);
                    acc!(*x, dx);
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    let (vx, vg) = (val!(*x), val!(*gain));
                    let (dx, dg, ds) =
                        kernels::layernorm_backward(&grad, vx.data(), vx.shape(), vg.data(), *eps);
                    acc!(*x, dx);
                    acc!(*gain, dg);
                    acc!(*shift, ds);
                }
                Op::Gelu(x) => {
                    let vx = val!(*x);
                    acc!(*x, kernels::gelu_backward(&grad, vx.data()));
                }
                Op::Reshape(x) => {
                    acc!(*x, grad.clone());
                }
                Op::Transpose(x, a, b) => {
                    let os = nodes[i].value.shape().to_vec();
                    let (dx, _) = kernels::transpose(&grad, &os, *a, *b);
                    acc!(*x, dx);
                }
                Op::Concat { parts, axis } => {
                    let os = nodes[i].value.shape().to_vec();
                    let inner: usize = os[*axis + 1..].iter().product();
                    let outer: usize = os[..*axis].iter().product();
                    let out_lane = os[*axis] * inner;
                    let mut off = 0usize;
                    for p in parts {
                        let ps = val!(*p).shape().to_vec();
                        let lane = ps[*axis] * inner;
                        let mut dp = vec![F::zero(); ps.iter().product()];
                        for o in 0..outer {
                            dp[o * lane..(o + 1) * lane].copy_from_slice(
                                &grad[o * out_lane + off..o * out_lane + off + lane],
                            );
                        }
                        acc!(*p, dp);
                        off += lane;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = val!(*x).shape().to_vec();
                    let os = nodes[i].value.shape().to_vec();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let outer: usize = xs[..*axis].iter().product();
                    let src_lane = xs[*axis] * inner;
                    let dst_lane = os[*axis] * inner;
                    let mut dx = vec![F::zero(); xs.iter().product()];
                    for o in 0..outer {
                        let s = o * src_lane + start * inner;
                        dx[s..s + dst_lane]
                            .copy_from_slice(&grad[o * dst_lane..(o + 1) * dst_lane]);
                    }
                    acc!(*x, dx);
                }
                Op::SumAll(x) => {
                    let n = val!(*x).numel();
                    acc!(*x, vec![grad[0]; n]);
                }
                Op::SoftmaxXent { logits, target } => {
                    // d/dz = softmax(z) − t
                    let vl = val!(*logits);
                    let probs = kernels::softmax(vl.data(), &[vl.numel()], 0);
                    let dx: Vec<F> = probs
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| grad[0] * (p - t))
                        .collect();
                    acc!(*logits, dx);
                }
                Op::BceLogits { logits, target } => {
                    // d/dz = (sigmoid(z) − t)/n
                    let vl = val!(*logits);
                    let inv_n = F::from_f64(1.0 / vl.numel() as f64);
                    let dx: Vec<F> = vl
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &t)| {
                            let s = F::one() / (F::one() + (-z).exp());
                            grad[0] * (s - t) * inv_n
                        })
                        .collect();
                    acc!(*logits, dx);
                }
            }
            nodes[i].op = op;
        }
        Ok(())
    }
}
