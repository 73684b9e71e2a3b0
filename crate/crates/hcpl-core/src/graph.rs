//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] stores every primitive operation in execution order together
//! with its output tensor. [`Tape::backward`] replays the record in reverse,
//! accumulating vector-Jacobian products into the leaves. Gradient sums are
//! accumulated strictly left-to-right in recording order, so results are
//! bit-reproducible across runs and thread counts.
//!
//! Elementwise binary ops accept equal shapes or one single-element operand
//! (the scalar is broadcast; its gradient is the sum over all positions).

use crate::error::{HcplError, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Primitive operation kinds.
#[derive(Debug, Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise power with a constant exponent. Non-integer exponents
    /// require a strictly positive base.
    PowConst(f64),
    /// Elementwise power with a learnable scalar exponent (second input,
    /// one element). Non-integer exponents require base >= 0; base == 0 is
    /// valid only for positive exponents and yields 0 with subgradient 0.
    Pow,
    Exp,
    Log,
    Relu,
    Sigmoid,
    /// Clamp into `[lo, hi]`; gradient passes through inside the interval.
    ClampConst { lo: f64, hi: f64 },
    /// `[m,k] x [k,n] -> [m,n]`.
    Matmul,
    /// Direct 2-D convolution (cross-correlation): input `[H,W,Cin]`,
    /// kernel `[kh,kw,Cin,Cout]`, optional third input bias `[Cout]`.
    Conv2d { stride: usize, pad: usize },
    /// Reduce over `axes` (`None` = all axes, producing a scalar).
    ReduceSum { axes: Option<Vec<usize>> },
    ReduceMean { axes: Option<Vec<usize>> },
    /// Max-reduce; the gradient routes to the argmax of each reduction
    /// group, ties broken by lowest flat index.
    ReduceMax { axes: Option<Vec<usize>> },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    /// Softmax over the last axis.
    Softmax,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::PowConst(_) => "pow-const",
            Op::Pow => "pow",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::ClampConst { .. } => "clamp",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::ReduceMax { .. } => "reduce_max",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Softmax => "softmax",
        }
    }
}

struct Node {
    op: Option<(Op, Vec<ValueId>)>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape. One tape per forward pass; drop it after `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register a leaf tensor (parameter or input).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { op: None, value, requires_grad, grad: None });
        ValueId(self.nodes.len() - 1)
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> ValueId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a value after `backward`.
    pub fn grad(&self, id: ValueId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Apply a primitive op to recorded values and record the result.
    pub fn apply(&mut self, op: Op, inputs: &[ValueId]) -> Result<ValueId> {
        let in_tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward(&op, &in_tensors)?;
        if !out.is_finite() {
            return Err(HcplError::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op: Some((op, inputs.to_vec())),
            value: out,
            requires_grad,
            grad: None,
        });
        Ok(ValueId(self.nodes.len() - 1))
    }

    // Convenience wrappers.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn pow_const(&mut self, a: ValueId, k: f64) -> Result<ValueId> {
        self.apply(Op::PowConst(k), &[a])
    }
    pub fn pow(&mut self, base: ValueId, exponent: ValueId) -> Result<ValueId> {
        self.apply(Op::Pow, &[base, exponent])
    }
    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Log, &[a])
    }
    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        self.apply(Op::ClampConst { lo, hi }, &[a])
    }
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.apply(Op::Conv2d { stride, pad }, &inputs)
    }
    pub fn reduce_sum(&mut self, a: ValueId, axes: Option<Vec<usize>>) -> Result<ValueId> {
        self.apply(Op::ReduceSum { axes }, &[a])
    }
    pub fn reduce_mean(&mut self, a: ValueId, axes: Option<Vec<usize>>) -> Result<ValueId> {
        self.apply(Op::ReduceMean { axes }, &[a])
    }
    pub fn reduce_max(&mut self, a: ValueId, axes: Option<Vec<usize>>) -> Result<ValueId> {
        self.apply(Op::ReduceMax { axes }, &[a])
    }
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.apply(Op::Reshape(shape), &[a])
    }
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Softmax, &[a])
    }

    /// Run the reverse pass from a scalar loss. Consumes the recording:
    /// a second call without re-recording is rejected.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(HcplError::Graph("backward called twice on one recording".into()));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(HcplError::Graph(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(HcplError::Graph(
                "loss does not depend on any gradient-tracked leaf".into(),
            ));
        }
        self.consumed = true;

        // Zero-init gradients of tracked leaves so disconnected leaves read 0.
        for node in self.nodes.iter_mut() {
            if node.op.is_none() && node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let Some((op, input_ids)) = self.nodes[idx].op.clone() else { continue };
            let grad_out = self.nodes[idx].grad.clone().expect("grad present");
            let out_value = self.nodes[idx].value.clone();
            let in_values: Vec<Tensor> =
                input_ids.iter().map(|id| self.nodes[id.0].value.clone()).collect();
            let contributions = backward_op(&op, &in_values, &out_value, &grad_out)?;
            for (input_id, contrib) in input_ids.iter().zip(contributions) {
                let node = &mut self.nodes[input_id.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&contrib) {
                            *gi += ci;
                        }
                    }
                    None => node.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

// ── forward kernels ──────────────────────────────────────────────────

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Add => elementwise_binary(inputs, "add", |a, b| a + b),
        Op::Sub => elementwise_binary(inputs, "sub", |a, b| a - b),
        Op::Mul => elementwise_binary(inputs, "mul", |a, b| a * b),
        Op::Div => elementwise_binary(inputs, "div", |a, b| a / b),
        Op::PowConst(k) => {
            let x = unary_input(inputs, "pow-const")?;
            if !is_integer_exponent(*k) {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(HcplError::InvalidOperand {
                        op: "pow-const",
                        detail: format!(
                            "non-integer exponent {} requires strictly positive base, got {}",
                            k, bad
                        ),
                    });
                }
            }
            Ok(x.map(|v| pow_elem(v, *k)))
        }
        Op::Pow => {
            if inputs.len() != 2 || inputs[1].numel() != 1 {
                return Err(HcplError::ShapeMismatch {
                    op: "pow",
                    detail: "expects (base tensor, one-element exponent)".into(),
                });
            }
            let e = inputs[1].data()[0];
            let x = inputs[0];
            if !is_integer_exponent(e) {
                for v in x.data() {
                    if *v < 0.0 {
                        return Err(HcplError::InvalidOperand {
                            op: "pow",
                            detail: format!(
                                "non-integer exponent {} requires non-negative base, got {}",
                                e, v
                            ),
                        });
                    }
                    if *v == 0.0 && e <= 0.0 {
                        return Err(HcplError::InvalidOperand {
                            op: "pow",
                            detail: format!("zero base with non-positive exponent {}", e),
                        });
                    }
                }
            }
            Ok(x.map(|v| pow_elem(v, e)))
        }
        Op::Exp => Ok(unary_input(inputs, "exp")?.map(f64::exp)),
        Op::Log => {
            let x = unary_input(inputs, "log")?;
            if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(HcplError::InvalidOperand {
                    op: "log",
                    detail: format!("requires strictly positive input, got {}", bad),
                });
            }
            Ok(x.map(f64::ln))
        }
        Op::Relu => Ok(unary_input(inputs, "relu")?.map(|v| v.max(0.0))),
        Op::Sigmoid => Ok(unary_input(inputs, "sigmoid")?.map(sigmoid)),
        Op::ClampConst { lo, hi } => {
            Ok(unary_input(inputs, "clamp")?.map(|v| v.clamp(*lo, *hi)))
        }
        Op::Matmul => matmul_forward(inputs),
        Op::Conv2d { stride, pad } => conv2d_forward(inputs, *stride, *pad),
        Op::ReduceSum { axes } => reduce_forward(inputs, axes.as_deref(), Reduction::Sum),
        Op::ReduceMean { axes } => reduce_forward(inputs, axes.as_deref(), Reduction::Mean),
        Op::ReduceMax { axes } => reduce_forward(inputs, axes.as_deref(), Reduction::Max),
        Op::Concat { axis } => concat_forward(inputs, *axis),
        Op::Reshape(shape) => {
            let x = unary_input(inputs, "reshape")?;
            x.reshaped(shape.clone())
        }
        Op::Softmax => softmax_forward(inputs),
    }
}

fn unary_input<'a>(inputs: &[&'a Tensor], op: &'static str) -> Result<&'a Tensor> {
    if inputs.len() != 1 {
        return Err(HcplError::ShapeMismatch {
            op: "arity",
            detail: format!("{} expects exactly one input, got {}", op, inputs.len()),
        });
    }
    Ok(inputs[0])
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn is_integer_exponent(e: f64) -> bool {
    e.fract() == 0.0 && e.abs() < 2_147_483_647.0
}

fn pow_elem(base: f64, e: f64) -> f64 {
    if is_integer_exponent(e) {
        base.powi(e as i32)
    } else {
        base.powf(e)
    }
}

enum BinaryShape {
    Equal,
    ScalarLeft,
    ScalarRight,
}

fn binary_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<BinaryShape> {
    if a.shape() == b.shape() {
        Ok(BinaryShape::Equal)
    } else if a.numel() == 1 {
        Ok(BinaryShape::ScalarLeft)
    } else if b.numel() == 1 {
        Ok(BinaryShape::ScalarRight)
    } else {
        Err(HcplError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

fn elementwise_binary(
    inputs: &[&Tensor],
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if inputs.len() != 2 {
        return Err(HcplError::ShapeMismatch {
            op,
            detail: format!("expects two inputs, got {}", inputs.len()),
        });
    }
    let (a, b) = (inputs[0], inputs[1]);
    let data = match binary_shape(a, b, op)? {
        BinaryShape::Equal => {
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>()
        }
        BinaryShape::ScalarLeft => {
            let s = a.data()[0];
            b.data().iter().map(|y| f(s, *y)).collect()
        }
        BinaryShape::ScalarRight => {
            let s = b.data()[0];
            a.data().iter().map(|x| f(*x, s)).collect()
        }
    };
    let shape = if a.numel() == 1 && b.numel() != 1 { b.shape() } else { a.shape() };
    Tensor::from_vec(shape.to_vec(), data)
}

fn matmul_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != 2 {
        return Err(HcplError::ShapeMismatch { op: "matmul", detail: "expects two inputs".into() });
    }
    let (a, b) = (inputs[0], inputs[1]);
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(HcplError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn conv2d_out_shape(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 || k.rank() != 4 {
        return Err(HcplError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input rank {} kernel rank {}", x.rank(), k.rank()),
        });
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kcin, _cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kcin != cin {
        return Err(HcplError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {} vs kernel channels {}", cin, kcin),
        });
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(HcplError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {}x{} too large for padded input {}x{}", kh, kw, h, w),
        });
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok((ho, wo, k.shape()[3]))
}

fn conv2d_forward(inputs: &[&Tensor], stride: usize, pad: usize) -> Result<Tensor> {
    if inputs.len() != 2 && inputs.len() != 3 {
        return Err(HcplError::ShapeMismatch {
            op: "conv2d",
            detail: "expects (input, kernel[, bias])".into(),
        });
    }
    let (x, k) = (inputs[0], inputs[1]);
    let (ho, wo, cout) = conv2d_out_shape(x, k, stride, pad)?;
    if let Some(b) = inputs.get(2) {
        if b.shape() != [cout] {
            return Err(HcplError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{}]", b.shape(), cout),
            });
        }
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let mut out = vec![0.0; ho * wo * cout];
    for i in 0..ho {
        for j in 0..wo {
            let obase = (i * wo + j) * cout;
            if let Some(b) = inputs.get(2) {
                out[obase..obase + cout].copy_from_slice(b.data());
            }
            for u in 0..kh {
                let r = (i * stride + u) as isize - pad as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let c = (j * stride + v) as isize - pad as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let xbase = ((r as usize) * w + c as usize) * cin;
                    let kbase = (u * kw + v) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let orow = &mut out[obase..obase + cout];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![ho, wo, cout], out)
}

enum Reduction {
    Sum,
    Mean,
    Max,
}

fn normalize_axes(rank: usize, axes: Option<&[usize]>) -> Result<Vec<usize>> {
    let mut axes: Vec<usize> = match axes {
        None => (0..rank).collect(),
        Some(a) => a.to_vec(),
    };
    axes.sort_unstable();
    axes.dedup();
    if axes.iter().any(|a| *a >= rank) {
        return Err(HcplError::ShapeMismatch {
            op: "reduce",
            detail: format!("axis out of range for rank {}", rank),
        });
    }
    Ok(axes)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, d)| *d)
        .collect()
}

/// Map every input flat index to its output flat index under axis reduction.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape = reduced_shape(shape, axes);
    let out_strides = strides_of(&out_shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
    let numel: usize = shape.iter().product();
    let mut map = vec![0usize; numel];
    for (flat, entry) in map.iter_mut().enumerate() {
        let mut out_flat = 0;
        for (oi, &axis) in kept.iter().enumerate() {
            let coord = (flat / in_strides[axis]) % shape[axis];
            out_flat += coord * out_strides[oi];
        }
        *entry = out_flat;
    }
    map
}

fn reduce_forward(inputs: &[&Tensor], axes: Option<&[usize]>, kind: Reduction) -> Result<Tensor> {
    let x = unary_input(inputs, "reduce")?;
    let axes = normalize_axes(x.rank(), axes)?;
    let out_shape = reduced_shape(x.shape(), &axes);
    let out_numel: usize = out_shape.iter().product();
    let map = reduce_index_map(x.shape(), &axes);
    let group: usize = axes.iter().map(|a| x.shape()[*a]).product();
    match kind {
        Reduction::Sum | Reduction::Mean => {
            let mut out = vec![0.0; out_numel];
            for (flat, v) in x.data().iter().enumerate() {
                out[map[flat]] += v;
            }
            if matches!(kind, Reduction::Mean) {
                let inv = 1.0 / group as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            Tensor::from_vec(out_shape, out)
        }
        Reduction::Max => {
            let mut out = vec![f64::NEG_INFINITY; out_numel];
            for (flat, v) in x.data().iter().enumerate() {
                let slot = &mut out[map[flat]];
                if *v > *slot {
                    *slot = *v;
                }
            }
            Tensor::from_vec(out_shape, out)
        }
    }
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(HcplError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
    }
    let rank = inputs[0].rank();
    if axis >= rank {
        return Err(HcplError::ShapeMismatch {
            op: "concat",
            detail: format!("axis {} out of range for rank {}", axis, rank),
        });
    }
    for t in inputs {
        if t.rank() != rank {
            return Err(HcplError::ShapeMismatch { op: "concat", detail: "rank mismatch".into() });
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != inputs[0].shape()[d] {
                return Err(HcplError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", t.shape(), inputs[0].shape()),
                });
            }
        }
    }
    let mut out_shape = inputs[0].shape().to_vec();
    out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for block in 0..outer {
        for t in inputs {
            let span = t.shape()[axis] * inner;
            let start = block * span;
            out.extend_from_slice(&t.data()[start..start + span]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn softmax_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let x = unary_input(inputs, "softmax")?;
    if x.rank() == 0 {
        return Err(HcplError::ShapeMismatch {
            op: "softmax",
            detail: "requires rank >= 1".into(),
        });
    }
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.numel() / cols;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

// ── backward kernels ─────────────────────────────────────────────────

/// Gradient of a scalar-broadcast binary operand: sum the elementwise
/// contributions when the operand was a single element.
fn collapse_to_shape(contrib: Vec<f64>, operand: &Tensor) -> Vec<f64> {
    if operand.numel() == 1 && contrib.len() != 1 {
        vec![contrib.iter().sum()]
    } else {
        contrib
    }
}

fn broadcast_val(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn backward_op(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    grad_out: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n_out = grad_out.len();
    match op {
        Op::Add => {
            let da = collapse_to_shape(grad_out.to_vec(), &inputs[0]);
            let db = collapse_to_shape(grad_out.to_vec(), &inputs[1]);
            Ok(vec![da, db])
        }
        Op::Sub => {
            let da = collapse_to_shape(grad_out.to_vec(), &inputs[0]);
            let db = collapse_to_shape(grad_out.iter().map(|g| -g).collect(), &inputs[1]);
            Ok(vec![da, db])
        }
        Op::Mul => {
            let da: Vec<f64> =
                (0..n_out).map(|i| grad_out[i] * broadcast_val(&inputs[1], i)).collect();
            let db: Vec<f64> =
                (0..n_out).map(|i| grad_out[i] * broadcast_val(&inputs[0], i)).collect();
            Ok(vec![collapse_to_shape(da, &inputs[0]), collapse_to_shape(db, &inputs[1])])
        }
        Op::Div => {
            let da: Vec<f64> =
                (0..n_out).map(|i| grad_out[i] / broadcast_val(&inputs[1], i)).collect();
            let db: Vec<f64> = (0..n_out)
                .map(|i| {
                    let b = broadcast_val(&inputs[1], i);
                    -grad_out[i] * broadcast_val(&inputs[0], i) / (b * b)
                })
                .collect();
            Ok(vec![collapse_to_shape(da, &inputs[0]), collapse_to_shape(db, &inputs[1])])
        }
        Op::PowConst(k) => {
            let x = &inputs[0];
            let da = x
                .data()
                .iter()
                .zip(grad_out)
                .map(|(v, g)| g * k * pow_deriv_base(*v, *k))
                .collect();
            Ok(vec![da])
        }
        Op::Pow => {
            let x = &inputs[0];
            let e = inputs[1].data()[0];
            let da: Vec<f64> = x
                .data()
                .iter()
                .zip(grad_out)
                .map(|(v, g)| g * e * pow_deriv_base(*v, e))
                .collect();
            // d/de x^e = x^e ln x; the term vanishes as x -> 0 with e > 0.
            let mut de = 0.0;
            for ((v, o), g) in x.data().iter().zip(output.data()).zip(grad_out) {
                if *v > 0.0 {
                    de += g * o * v.ln();
                }
            }
            Ok(vec![da, vec![de]])
        }
        Op::Exp => {
            Ok(vec![output.data().iter().zip(grad_out).map(|(o, g)| g * o).collect()])
        }
        Op::Log => {
            Ok(vec![inputs[0].data().iter().zip(grad_out).map(|(v, g)| g / v).collect()])
        }
        Op::Relu => Ok(vec![inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
            .collect()]),
        Op::Sigmoid => Ok(vec![output
            .data()
            .iter()
            .zip(grad_out)
            .map(|(o, g)| g * o * (1.0 - o))
            .collect()]),
        Op::ClampConst { lo, hi } => Ok(vec![inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(v, g)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
            .collect()]),
        Op::Matmul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = g . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for kk in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grad_out[i * n + j] * b.data()[kk * n + j];
                    }
                    da[i * k + kk] = acc;
                }
            }
            // dB = A^T . g
            let mut db = vec![0.0; k * n];
            for kk in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.data()[i * k + kk] * grad_out[i * n + j];
                    }
                    db[kk * n + j] = acc;
                }
            }
            Ok(vec![da, db])
        }
        Op::Conv2d { stride, pad } => conv2d_backward(inputs, grad_out, *stride, *pad),
        Op::ReduceSum { axes } => {
            let x = &inputs[0];
            let axes = normalize_axes(x.rank(), axes.as_deref())?;
            let map = reduce_index_map(x.shape(), &axes);
            Ok(vec![(0..x.numel()).map(|i| grad_out[map[i]]).collect()])
        }
        Op::ReduceMean { axes } => {
            let x = &inputs[0];
            let axes = normalize_axes(x.rank(), axes.as_deref())?;
            let map = reduce_index_map(x.shape(), &axes);
            let group: f64 = axes.iter().map(|a| x.shape()[*a] as f64).product();
            Ok(vec![(0..x.numel()).map(|i| grad_out[map[i]] / group).collect()])
        }
        Op::ReduceMax { axes } => {
            let x = &inputs[0];
            let axes = normalize_axes(x.rank(), axes.as_deref())?;
            let map = reduce_index_map(x.shape(), &axes);
            // Argmax per group, lowest flat index on ties (strict > keeps
            // the earliest maximum during the forward-order scan).
            let out_numel = output.numel();
            let mut best = vec![f64::NEG_INFINITY; out_numel];
            let mut arg = vec![usize::MAX; out_numel];
            for (flat, v) in x.data().iter().enumerate() {
                let o = map[flat];
                if *v > best[o] {
                    best[o] = *v;
                    arg[o] = flat;
                }
            }
            let mut dx = vec![0.0; x.numel()];
            for (o, flat) in arg.iter().enumerate() {
                dx[*flat] += grad_out[o];
            }
            Ok(vec![dx])
        }
        Op::Concat { axis } => {
            let rank = inputs[0].rank();
            let inner: usize = inputs[0].shape()[axis + 1..rank].iter().product();
            let outer: usize = inputs[0].shape()[..*axis].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut grads: Vec<Vec<f64>> =
                inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
            for block in 0..outer {
                let mut offset = 0;
                for (ti, t) in inputs.iter().enumerate() {
                    let span = t.shape()[*axis] * inner;
                    let src = (block * total_axis * inner) + offset;
                    let dst = block * span;
                    grads[ti][dst..dst + span].copy_from_slice(&grad_out[src..src + span]);
                    offset += span;
                }
            }
            Ok(grads)
        }
        Op::Reshape(_) => Ok(vec![grad_out.to_vec()]),
        Op::Softmax => {
            let cols = *output.shape().last().expect("rank >= 1");
            let rows = output.numel() / cols;
            let y = output.data();
            let mut dx = vec![0.0; output.numel()];
            for r in 0..rows {
                let base = r * cols;
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += grad_out[base + c] * y[base + c];
                }
                for c in 0..cols {
                    dx[base + c] = y[base + c] * (grad_out[base + c] - dot);
                }
            }
            Ok(vec![dx])
        }
    }
}

/// d(base^e)/d(base) without the exponent factor: base^(e-1), with the
/// base == 0 subgradient pinned to the finite convention used in forward.
fn pow_deriv_base(base: f64, e: f64) -> f64 {
    if base == 0.0 {
        if e == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        pow_elem(base, e - 1.0)
    }
}

fn conv2d_backward(
    inputs: &[Tensor],
    grad_out: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Vec<Vec<f64>>> {
    let (x, k) = (&inputs[0], &inputs[1]);
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (ho, wo, _) = conv2d_out_shape(x, k, stride, pad)?;
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    for i in 0..ho {
        for j in 0..wo {
            let obase = (i * wo + j) * cout;
            for u in 0..kh {
                let r = (i * stride + u) as isize - pad as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let c = (j * stride + v) as isize - pad as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let xbase = ((r as usize) * w + c as usize) * cin;
                    let kbase = (u * kw + v) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let g = grad_out[obase + co];
                            acc += g * k.data()[kbase + ci * cout + co];
                            dk[kbase + ci * cout + co] += g * xv;
                        }
                        dx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    let mut grads = vec![dx, dk];
    if inputs.len() == 3 {
        let mut db = vec![0.0; cout];
        for ij in 0..ho * wo {
            for co in 0..cout {
                db[co] += grad_out[ij * cout + co];
            }
        }
        grads.push(db);
    }
    Ok(grads)
}

// ── finite differences ───────────────────────────────────────────────

/// Central-difference gradient of a deterministic scalar function.
///
/// The function is evaluated twice at `x` first; a bitwise disagreement
/// means it is not deterministic and is rejected.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(HcplError::InvalidOperand {
            op: "finite_difference",
            detail: format!("step h must be positive, got {}", h),
        });
    }
    let base1 = f(x)?;
    let base2 = f(x)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(HcplError::InvalidOperand {
            op: "finite_difference",
            detail: "function is not deterministic across repeated evaluation".into(),
        });
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}
