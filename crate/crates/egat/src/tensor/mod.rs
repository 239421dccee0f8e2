//! Dense f64 tensors and a composable reverse-mode differentiation tape.
//!
//! Operations are recorded eagerly: constructing a node evaluates it, and the
//! insertion order of the tape is a topological order of the graph. The
//! distinguishing property is that [`Tape::backward`] emits its results as new
//! tape nodes built from ordinary differentiable operations, so gradients can
//! themselves be differentiated (double backprop). Ops with non-differentiable
//! kinks (`relu`, `abs`, `clamp`, max pooling) treat the switching pattern as
//! locally constant, i.e. their second derivative is defined as zero; the hard
//! `sign` op has no registered derivative at all and differentiating through
//! it is an error.

mod conv;
mod linmap;

use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

pub use linmap::LinMap;

/// Additive floor applied inside `log` and to the denominator of `div`.
pub const EPS_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node does not belong to this tape")]
    ForeignNode,
    #[error("`{op}` has no registered derivative; the graph cannot be differentiated through it")]
    UnsupportedBackward { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("tensors must be non-empty")]
    Empty,
}

/// A plain n-dimensional value: shape plus row-major f64 storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || data.is_empty() {
            return Err(TensorError::Empty);
        }
        if len != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId {
    tape: u32,
    index: u32,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Exp(NodeId),
    LogEps(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    ReluMask(NodeId),
    Abs(NodeId),
    SignMask(NodeId),
    Sign(NodeId),
    Clamp(NodeId, f64, f64),
    ClampMask(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Max(NodeId, u32),
    Broadcast(NodeId),
    Reshape(NodeId),
    MatVec { m: NodeId, v: NodeId, transpose: bool },
    Outer(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId },
    ConvInputGrad { g: NodeId, w: NodeId },
    ConvKernelGrad { x: NodeId, g: NodeId },
    Linear { x: NodeId, map: Rc<LinMap> },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(NodeId)) {
        match *self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Outer(a, b)
            | Op::MatVec { m: a, v: b, .. }
            | Op::Conv2d { x: a, w: b }
            | Op::ConvInputGrad { g: a, w: b }
            | Op::ConvKernelGrad { x: a, g: b } => {
                f(a);
                f(b);
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::LogEps(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::ReluMask(a)
            | Op::Abs(a)
            | Op::SignMask(a)
            | Op::Sign(a)
            | Op::Clamp(a, _, _)
            | Op::ClampMask(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Max(a, _)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Linear { x: a, .. } => f(a),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

/// An append-only operation record. Evaluation happens at construction, and
/// node ids double as topological positions.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.tape, self.id, "node from another tape");
        &self.nodes[id.index as usize].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        assert_eq!(id.tape, self.id, "node from another tape");
        self.nodes[id.index as usize].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<(), TensorError> {
        if id.tape != self.id || id.index as usize >= self.nodes.len() {
            return Err(TensorError::ForeignNode);
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let mut requires = false;
        op.for_each_input(|i| requires |= self.nodes[i.index as usize].requires_grad);
        self.push_with(op, value, requires)
    }

    fn push_with(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { op, value, requires_grad });
        NodeId { tape: self.id, index }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_with(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("add", a, b)?;
        Ok(self.add_raw(a, b))
    }

    fn add_raw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("sub", a, b)?;
        Ok(self.sub_raw(a, b))
    }

    fn sub_raw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("mul", a, b)?;
        Ok(self.mul_raw(a, b))
    }

    fn mul_raw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// `a / (b + EPS_GUARD)`, elementwise.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("div", a, b)?;
        Ok(self.div_raw(a, b))
    }

    fn div_raw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x / (y + EPS_GUARD));
        self.push(Op::Div(a, b), v)
    }

    // ── elementwise unary ───────────────────────────────────────────────

    fn unary(
        &mut self,
        op: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId, TensorError> {
        self.check(a).map_err(|_| TensorError::ShapeMismatch {
            op,
            details: "input from another tape".into(),
        })?;
        let v = self.value(a).map(f);
        Ok(self.push(make(a), v))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        self.unary("mul_scalar", a, |x| x * s, |a| Op::MulScalar(a, s))
    }

    fn mul_scalar_raw(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.mul_scalar(a, -1.0)
    }

    /// Elementwise `a^p` for a fixed exponent. Fractional or negative `p`
    /// assumes positive inputs.
    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> Result<NodeId, TensorError> {
        self.unary("pow_scalar", a, |x| x.powf(p), |a| Op::PowScalar(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// `ln(a + EPS_GUARD)`; defined for `a >= 0`.
    pub fn log_eps(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("log", a, |x| (x + EPS_GUARD).ln(), Op::LogEps)
    }

    /// `sqrt(max(a, 0))`.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("sqrt", a, |x| x.max(0.0).sqrt(), Op::Sqrt)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::ReluMask(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("abs", a, f64::abs, Op::Abs)
    }

    fn sign_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.push(Op::SignMask(a), v)
    }

    /// Hard sign with `sign(0) = 0`. Not differentiable: any backward pass
    /// through this node reports an unsupported-op error.
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(
            "sign",
            a,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            Op::Sign,
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), |a| Op::Clamp(a, lo, hi))
    }

    fn clamp_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        self.push(Op::ClampMask(a), v)
    }

    /// Softmax over the whole (flat) tensor, computed with max-shifting.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let t = self.value(a);
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let v = Tensor::from_parts(t.shape().to_vec(), exps.into_iter().map(|e| e / z).collect());
        Ok(self.push(Op::Softmax(a), v))
    }

    // ── reductions and shape ops ────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        Ok(self.sum_raw(a))
    }

    fn sum_raw(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Global max; the argmax (first in scan order on ties) is frozen for the
    /// backward route.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let data = self.value(a).data();
        let mut best = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(data[best]);
        Ok(self.push(Op::Max(a, best as u32), v))
    }

    pub fn min(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let n = self.neg(a)?;
        let m = self.max(n)?;
        self.neg(m)
    }

    /// Repeat a scalar node over `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let t = self.value(a);
        if !t.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                details: format!("expected scalar source, got {:?}", t.shape()),
            });
        }
        Ok(self.broadcast_raw(a, shape))
    }

    fn broadcast_raw(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = Tensor::filled(shape, self.value(a).item());
        self.push(Op::Broadcast(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} ({} elems) to {shape:?}", t.shape(), t.len()),
            });
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(Op::Reshape(a), v))
    }

    // ── dense algebra ───────────────────────────────────────────────────

    /// `m @ v` for a 2-D `m`, or `m^T @ v` when `transpose` is set.
    pub fn matvec(&mut self, m: NodeId, v: NodeId, transpose: bool) -> Result<NodeId, TensorError> {
        self.check(m)?;
        self.check(v)?;
        let ms = self.shape(m).to_vec();
        let vlen = self.value(v).len();
        if ms.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                details: format!("matrix must be 2-D, got {ms:?}"),
            });
        }
        let (rows, cols) = (ms[0], ms[1]);
        let expected = if transpose { rows } else { cols };
        if vlen != expected {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                details: format!("matrix {ms:?} (transpose={transpose}) with vector of length {vlen}"),
            });
        }
        Ok(self.matvec_raw(m, v, transpose))
    }

    fn matvec_raw(&mut self, m: NodeId, v: NodeId, transpose: bool) -> NodeId {
        let ms = self.shape(m).to_vec();
        let (rows, cols) = (ms[0], ms[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let out = if transpose {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                let mrow = &md[r * cols..(r + 1) * cols];
                let coeff = vd[r];
                for (o, mv) in out.iter_mut().zip(mrow) {
                    *o += coeff * mv;
                }
            }
            Tensor::from_parts(vec![cols], out)
        } else {
            let mut out = vec![0.0; rows];
            for (r, o) in out.iter_mut().enumerate() {
                let mrow = &md[r * cols..(r + 1) * cols];
                *o = mrow.iter().zip(vd).map(|(a, b)| a * b).sum();
            }
            Tensor::from_parts(vec![rows], out)
        };
        self.push(Op::MatVec { m, v, transpose }, out)
    }

    /// Outer product of two vectors: `(m,) x (n,) -> (m, n)`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "outer",
                details: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(self.outer_raw(a, b))
    }

    fn outer_raw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let (m, n) = (ad.len(), bd.len());
        let mut out = Vec::with_capacity(m * n);
        for &av in ad {
            out.extend(bd.iter().map(|&bv| av * bv));
        }
        self.push(Op::Outer(a, b), Tensor::from_parts(vec![m, n], out))
    }

    // ── convolution family ──────────────────────────────────────────────

    /// Valid 2-D convolution, stride 1: input `(C, H, W)`, kernel
    /// `(O, C, kh, kw)`, output `(O, H-kh+1, W-kw+1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] || xs[1] < ws[2] || xs[2] < ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                details: format!("input {xs:?} with kernel {ws:?}"),
            });
        }
        Ok(self.conv2d_raw(x, w))
    }

    fn conv2d_raw(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; o * oh * ow];
        conv::forward(self.value(x).data(), (c, h, wd), self.value(w).data(), (o, kh, kw), &mut out);
        self.push(Op::Conv2d { x, w }, Tensor::from_parts(vec![o, oh, ow], out))
    }

    fn conv_input_grad_raw(&mut self, g: NodeId, w: NodeId) -> NodeId {
        let gs = self.shape(g).to_vec();
        let ws = self.shape(w).to_vec();
        let (o, oh, ow) = (gs[0], gs[1], gs[2]);
        let (c, kh, kw) = (ws[1], ws[2], ws[3]);
        let (h, wd) = (oh + kh - 1, ow + kw - 1);
        let mut out = vec![0.0; c * h * wd];
        conv::input_grad(self.value(g).data(), (o, oh, ow), self.value(w).data(), (c, kh, kw), &mut out);
        self.push(Op::ConvInputGrad { g, w }, Tensor::from_parts(vec![c, h, wd], out))
    }

    fn conv_kernel_grad_raw(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, oh, ow) = (gs[0], gs[1], gs[2]);
        let (kh, kw) = (h - oh + 1, wd - ow + 1);
        let mut out = vec![0.0; o * c * kh * kw];
        conv::kernel_grad(self.value(x).data(), (c, h, wd), self.value(g).data(), (o, oh, ow), &mut out);
        self.push(Op::ConvKernelGrad { x, g }, Tensor::from_parts(vec![o, c, kh, kw], out))
    }

    // ── structural linear maps ──────────────────────────────────────────

    pub fn apply_linmap(&mut self, x: NodeId, map: Rc<LinMap>) -> Result<NodeId, TensorError> {
        self.check(x)?;
        if self.shape(x) != map.in_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: map.tag(),
                details: format!("input {:?}, map expects {:?}", self.shape(x), map.in_shape),
            });
        }
        Ok(self.linmap_raw(x, map))
    }

    fn linmap_raw(&mut self, x: NodeId, map: Rc<LinMap>) -> NodeId {
        let v = map.apply(self.value(x).data());
        self.push(Op::Linear { x, map }, v)
    }

    fn spatial3(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize), TensorError> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("expected (C, H, W), got {s:?}"),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.spatial3("maxpool2", x)?;
        if h < 2 || w < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2",
                details: format!("spatial extent too small: ({h}, {w})"),
            });
        }
        let map = Rc::new(linmap::maxpool2_frozen(self.value(x), c, h, w));
        Ok(self.linmap_raw(x, map))
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.spatial3("avgpool2", x)?;
        if h < 2 || w < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "avgpool2",
                details: format!("spatial extent too small: ({h}, {w})"),
            });
        }
        Ok(self.linmap_raw(x, Rc::new(linmap::avgpool2(c, h, w))))
    }

    /// Bilinear upsampling of a 2-D map with corner alignment. Requesting a
    /// smaller output is an error.
    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_bilinear",
                details: format!("expected (H, W), got {s:?}"),
            });
        }
        if oh < s[0] || ow < s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_bilinear",
                details: format!("target ({oh}, {ow}) is smaller than source ({}, {})", s[0], s[1]),
            });
        }
        Ok(self.linmap_raw(x, Rc::new(linmap::bilinear_upsample(s[0], s[1], oh, ow))))
    }

    /// Per-channel spatial mean: `(K, h, w) -> (K,)`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (k, h, w) = self.spatial3("channel_mean", x)?;
        Ok(self.linmap_raw(x, Rc::new(linmap::channel_mean(k, h, w))))
    }

    /// Broadcast per-channel weights over a spatial extent: `(K,) -> (K, h, w)`.
    pub fn channel_broadcast(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "channel_broadcast",
                details: format!("expected (K,), got {s:?}"),
            });
        }
        Ok(self.linmap_raw(x, Rc::new(linmap::channel_broadcast(s[0], h, w))))
    }

    /// Sum across channels: `(K, h, w) -> (h, w)`.
    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (k, h, w) = self.spatial3("channel_sum", x)?;
        Ok(self.linmap_raw(x, Rc::new(linmap::channel_sum(k, h, w))))
    }

    /// Select a single element as a scalar node.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        if index >= t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                details: format!("index {index} out of {} elements", t.len()),
            });
        }
        let map = Rc::new(linmap::select_index(t.shape(), index));
        Ok(self.linmap_raw(x, map))
    }

    /// Gather the elements where `mask` is true.
    pub fn mask_gather(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        if mask.len() != t.len() || mask.iter().all(|&m| !m) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_gather",
                details: format!("mask of {} bits over {} elements", mask.len(), t.len()),
            });
        }
        let map = Rc::new(linmap::mask_gather(t.shape(), mask));
        Ok(self.linmap_raw(x, map))
    }

    // ── composite helpers ───────────────────────────────────────────────

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// `sqrt(sum(x^2))`.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sq = self.mul(x, x)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// `sum(|x|)`.
    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// `KL(p || q) = sum p * (ln(p + eps) - ln(q + eps))` for probability
    /// vectors; exactly zero when `p` and `q` are the same node values.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, TensorError> {
        let lp = self.log_eps(p)?;
        let lq = self.log_eps(q)?;
        let d = self.sub(lp, lq)?;
        let t = self.mul(p, d)?;
        self.sum(t)
    }

    /// `-ln(probs[label] + eps)`.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId, TensorError> {
        let p = self.select(probs, label)?;
        let lp = self.log_eps(p)?;
        self.neg(lp)
    }

    /// Mean binary cross-entropy of predictions in `[0, 1]` against targets in
    /// `[0, 1]`.
    pub fn bce_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("bce", pred, target)?;
        let shape = self.shape(pred).to_vec();
        let ones = self.constant(Tensor::filled(&shape, 1.0));
        let lp = self.log_eps(pred)?;
        let omp = self.sub(ones, pred)?;
        let lomp = self.log_eps(omp)?;
        let omt = self.sub(ones, target)?;
        let a = self.mul(target, lp)?;
        let b = self.mul(omt, lomp)?;
        let s = self.add(a, b)?;
        let m = self.mean(s)?;
        self.neg(m)
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `output` with respect to each node
    /// in `wrt`. The results are new tape nodes and remain differentiable.
    /// Nodes that do not influence `output` get zero-filled gradients.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, TensorError> {
        self.check(output)?;
        for w in wrt {
            self.check(*w)?;
        }
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(TensorError::NonScalarOutput(out_val.shape().to_vec()));
        }

        let n = output.index as usize + 1;
        // Forward reachability from the wrt set; adjoints only flow along
        // nodes that actually connect wrt to the output.
        let mut reach = vec![false; n];
        for w in wrt {
            if (w.index as usize) < n {
                reach[w.index as usize] = true;
            }
        }
        for i in 0..n {
            if reach[i] {
                continue;
            }
            let mut r = false;
            self.nodes[i].op.for_each_input(|p| r |= reach[p.index as usize]);
            reach[i] = r;
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if reach[output.index as usize] {
            adj[output.index as usize] = Some(self.scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = NodeId { tape: self.id, index: i as u32 };
            self.vjp(&op, this, g, &reach, &mut adj)?;
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for w in wrt {
            let slot = adj.get(w.index as usize).copied().flatten();
            grads.push(match slot {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            });
        }
        Ok(grads)
    }

    /// Convenience wrapper returning gradient values instead of node ids.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, TensorError> {
        let ids = self.backward(output, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    /// `d/d(wrt2) of (d output / d wrt1)`, returned as a dense Jacobian of
    /// shape `(numel(wrt1), numel(wrt2))`. Symmetric (up to roundoff) for
    /// twice-differentiable graphs.
    pub fn second_order_grad(
        &mut self,
        output: NodeId,
        wrt1: NodeId,
        wrt2: NodeId,
    ) -> Result<Tensor, TensorError> {
        let g1 = self.backward(output, &[wrt1])?[0];
        let n1 = self.value(g1).len();
        let n2 = self.value(wrt2).len();
        let mut rows = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            let gi = self.select(g1, i)?;
            let row = self.backward(gi, &[wrt2])?[0];
            rows.extend_from_slice(self.value(row).data());
        }
        Ok(Tensor::from_parts(vec![n1, n2], rows))
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        reach: &[bool],
        target: NodeId,
        contribution: impl FnOnce(&mut Self) -> NodeId,
    ) {
        let idx = target.index as usize;
        if !reach[idx] {
            return;
        }
        let c = contribution(self);
        adj[idx] = Some(match adj[idx] {
            Some(prev) => self.add_raw(prev, c),
            None => c,
        });
    }

    fn vjp(
        &mut self,
        op: &Op,
        this: NodeId,
        g: NodeId,
        reach: &[bool],
        adj: &mut Vec<Option<NodeId>>,
    ) -> Result<(), TensorError> {
        match *op {
            Op::Leaf | Op::ReluMask(_) | Op::SignMask(_) | Op::ClampMask(_) => {}
            Op::Sign(_) => return Err(TensorError::UnsupportedBackward { op: "sign" }),
            Op::Add(a, b) => {
                self.accumulate(adj, reach, a, |_| g);
                self.accumulate(adj, reach, b, |_| g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, reach, a, |_| g);
                self.accumulate(adj, reach, b, |t| t.mul_scalar_raw(g, -1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(adj, reach, a, |t| t.mul_raw(g, b));
                self.accumulate(adj, reach, b, |t| t.mul_raw(g, a));
            }
            Op::Div(a, b) => {
                // out = a / (b + eps): da = g / (b + eps), db = -g * out / (b + eps)
                self.accumulate(adj, reach, a, |t| t.div_raw(g, b));
                self.accumulate(adj, reach, b, |t| {
                    let go = t.mul_raw(g, this);
                    let d = t.div_raw(go, b);
                    t.mul_scalar_raw(d, -1.0)
                });
            }
            Op::AddScalar(a) => self.accumulate(adj, reach, a, |_| g),
            Op::MulScalar(a, s) => self.accumulate(adj, reach, a, |t| t.mul_scalar_raw(g, s)),
            Op::PowScalar(a, p) => self.accumulate(adj, reach, a, |t| {
                let pm1 = t.pow_scalar(a, p - 1.0).expect("pow vjp");
                let scaled = t.mul_scalar_raw(pm1, p);
                t.mul_raw(g, scaled)
            }),
            Op::Exp(a) => self.accumulate(adj, reach, a, |t| t.mul_raw(g, this)),
            Op::LogEps(a) => self.accumulate(adj, reach, a, |t| t.div_raw(g, a)),
            Op::Sqrt(a) => self.accumulate(adj, reach, a, |t| {
                let half = t.mul_scalar_raw(g, 0.5);
                t.div_raw(half, this)
            }),
            Op::Relu(a) => self.accumulate(adj, reach, a, |t| {
                let m = t.relu_mask(a);
                t.mul_raw(g, m)
            }),
            Op::Abs(a) => self.accumulate(adj, reach, a, |t| {
                let m = t.sign_mask(a);
                t.mul_raw(g, m)
            }),
            Op::Clamp(a, lo, hi) => self.accumulate(adj, reach, a, |t| {
                let m = t.clamp_mask(a, lo, hi);
                t.mul_raw(g, m)
            }),
            Op::Softmax(a) => self.accumulate(adj, reach, a, |t| {
                // dx = y * (g - <g, y>)
                let gy = t.mul_raw(g, this);
                let s = t.sum_raw(gy);
                let shape = t.shape(this).to_vec();
                let b = t.broadcast_raw(s, &shape);
                let d = t.sub_raw(g, b);
                t.mul_raw(this, d)
            }),
            Op::Sum(a) => self.accumulate(adj, reach, a, |t| {
                let shape = t.shape(a).to_vec();
                t.broadcast_raw(g, &shape)
            }),
            Op::Max(a, argmax) => self.accumulate(adj, reach, a, |t| {
                let shape = t.shape(a).to_vec();
                let map = Rc::new(LinMap::new(
                    "max_route",
                    vec![1],
                    shape,
                    vec![(argmax, 0, 1.0)],
                ));
                t.linmap_raw(g, map)
            }),
            Op::Broadcast(a) => self.accumulate(adj, reach, a, |t| t.sum_raw(g)),
            Op::Reshape(a) => self.accumulate(adj, reach, a, |t| {
                let shape = t.shape(a).to_vec();
                t.reshape(g, &shape).expect("reshape vjp")
            }),
            Op::MatVec { m, v, transpose } => {
                if transpose {
                    // z = m^T v: dm = v (x) g, dv = m g
                    self.accumulate(adj, reach, m, |t| t.outer_raw(v, g));
                    self.accumulate(adj, reach, v, |t| t.matvec_raw(m, g, false));
                } else {
                    // y = m v: dm = g (x) v, dv = m^T g
                    self.accumulate(adj, reach, m, |t| t.outer_raw(g, v));
                    self.accumulate(adj, reach, v, |t| t.matvec_raw(m, g, true));
                }
            }
            Op::Outer(a, b) => {
                self.accumulate(adj, reach, a, |t| t.matvec_raw(g, b, false));
                self.accumulate(adj, reach, b, |t| t.matvec_raw(g, a, true));
            }
            Op::Conv2d { x, w } => {
                self.accumulate(adj, reach, x, |t| t.conv_input_grad_raw(g, w));
                self.accumulate(adj, reach, w, |t| t.conv_kernel_grad_raw(x, g));
            }
            Op::ConvInputGrad { g: g0, w } => {
                self.accumulate(adj, reach, g0, |t| t.conv2d_raw(g, w));
                self.accumulate(adj, reach, w, |t| t.conv_kernel_grad_raw(g, g0));
            }
            Op::ConvKernelGrad { x, g: g0 } => {
                self.accumulate(adj, reach, x, |t| t.conv_input_grad_raw(g0, g));
                self.accumulate(adj, reach, g0, |t| t.conv2d_raw(x, g));
            }
            Op::Linear { x, ref map } => {
                let tmap = map.transposed();
                self.accumulate(adj, reach, x, |t| t.linmap_raw(g, tmap));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> NodeId {
        tape.leaf(Tensor::scalar(v), true)
    }

    #[test]
    fn square_forward_and_grad() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.grad_values(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn kl_of_identical_distributions_is_exactly_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -1.0, 0.4]).unwrap(), true);
        let p = tape.softmax(x).unwrap();
        let kl = tape.kl_div(p, p).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let g = tape.grad_values(kl, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_order_cube() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let y = tape.pow_scalar(x, 3.0).unwrap();
        let h = tape.second_order_grad(y, x, x).unwrap();
        assert!((h.item() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn second_order_relu_is_zero() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 1.0);
        let y = tape.relu(x).unwrap();
        let h = tape.second_order_grad(y, x, x).unwrap();
        assert_eq!(h.item(), 0.0);
    }

    #[test]
    fn sign_backward_is_unsupported() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 0.7);
        let s = tape.sign(x).unwrap();
        let y = tape.mul(s, x).unwrap();
        let err = tape.backward(y, &[x]).unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedBackward { op: "sign" }));
    }

    #[test]
    fn gradient_of_disconnected_node_is_zero_filled() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let z = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad_values(y, &[z]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[0].shape(), &[2]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y, &[x]), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn foreign_node_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = scalar_leaf(&mut t1, 1.0);
        let b = scalar_leaf(&mut t2, 2.0);
        assert!(matches!(t1.add(a, b), Err(TensorError::ForeignNode)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a f + b g) == a grad(f) + b grad(g) on the same graph.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap(), true);
        let f = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq).unwrap()
        };
        let g = {
            let e = tape.exp(x).unwrap();
            tape.sum(e).unwrap()
        };
        let (a, b) = (2.5, -0.75);
        let af = tape.mul_scalar(f, a).unwrap();
        let bg = tape.mul_scalar(g, b).unwrap();
        let combo = tape.add(af, bg).unwrap();
        let gc = tape.grad_values(combo, &[x]).unwrap()[0].clone();
        let gf = tape.grad_values(f, &[x]).unwrap()[0].clone();
        let gg = tape.grad_values(g, &[x]).unwrap()[0].clone();
        for i in 0..3 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_reevaluation() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![4], vec![0.1, 0.7, -0.3, 1.9]).unwrap(), true);
            let e = tape.exp(x).unwrap();
            let s = tape.softmax(e).unwrap();
            let l = tape.cross_entropy(s, 2).unwrap();
            let g = tape.grad_values(l, &[x]).unwrap()[0].clone();
            (tape.value(l).item(), g)
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn upsample_rejects_downsampling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(tape.upsample_bilinear(x, 2, 4).is_err());
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.13).collect()).unwrap();
        let x = tape.constant(t.clone());
        let y = tape.upsample_bilinear(x, 3, 3).unwrap();
        assert_eq!(tape.value(y), &t);
    }

    #[test]
    fn upsample_rows_closed_form() {
        // (0, 1) stretched to width 4 with corner alignment: 0, 1/3, 2/3, 1.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = tape.upsample_bilinear(x, 2, 4).unwrap();
        let d = tape.value(y).data();
        for row in 0..2 {
            for (j, expect) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((d[row * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 2], vec![0.3, 0.9, 0.1, 0.2]).unwrap(),
            true,
        );
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.9]);
        let s = tape.sum(p).unwrap();
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_scalar_loop_oracle() {
        // 3x3 averaging kernel over a 5x5 ramp, checked against a brute-force
        // scalar implementation written independently of the tape kernels.
        let ramp: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let kernel = vec![1.0 / 9.0; 9];
        let mut oracle = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for u in 0..3 {
                    for v in 0..3 {
                        acc += ramp[(i + u) * 5 + (j + v)] / 9.0;
                    }
                }
                oracle[i * 3 + j] = acc;
            }
        }

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 5, 5], ramp).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], kernel).unwrap());
        let y = tape.conv2d(x, w).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        for (got, want) in tape.value(y).data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
