//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation touching a gradient-tracked leaf into a
//! linear arena; [`Tape::backward_seeded`] replays the arena in exact reverse
//! recording order. Tensors are immutable values: cloning shares the payload,
//! and tensors without a tape node behave as plain constants so the same
//! model code runs in training (recorded) and evaluation (unrecorded) modes.
//!
//! The spike nonlinearity is the one deliberately non-smooth op: its forward
//! is a hard step, its backward is a configurable surrogate derivative, and a
//! `smooth` flag swaps the forward for the surrogate itself so finite
//! differences of the smooth path can cross-check the tape.

use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Clamp floor applied to every `log` input.
pub const LOG_CLAMP: f64 = 1e-8;
/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound of the min-max normalization range `(eps, 1]`.
pub const MINMAX_EPS: f64 = 1e-3;

// ── Surrogate gradients ──────────────────────────────────────────────

/// Smooth stand-in derivative for the spike step function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SurrogateKind {
    /// sigma(alpha * x); derivative alpha * sigma * (1 - sigma).
    Sigmoid { alpha: f64 },
    /// 0.5 + atan(pi/2 * alpha * x) / pi; derivative alpha / (2 * (1 + (pi/2 * alpha * x)^2)).
    ArcTan { alpha: f64 },
}

impl Default for SurrogateKind {
    fn default() -> Self {
        SurrogateKind::Sigmoid { alpha: 4.0 }
    }
}

impl SurrogateKind {
    /// The smooth function whose derivative serves as the backward rule.
    pub fn smooth(&self, x: f64) -> f64 {
        match *self {
            SurrogateKind::Sigmoid { alpha } => sigmoid(alpha * x),
            SurrogateKind::ArcTan { alpha } => {
                0.5 + (std::f64::consts::FRAC_PI_2 * alpha * x).atan() / std::f64::consts::PI
            }
        }
    }

    /// Derivative of [`SurrogateKind::smooth`] at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            SurrogateKind::Sigmoid { alpha } => {
                let s = sigmoid(alpha * x);
                alpha * s * (1.0 - s)
            }
            SurrogateKind::ArcTan { alpha } => {
                let c = std::f64::consts::FRAC_PI_2 * alpha * x;
                alpha / (2.0 * (1.0 + c * c))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Recorded operations ──────────────────────────────────────────────

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul,
    TransposeLast,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Sqrt,
    /// out = mul * x + add; only the slope matters to the gradient.
    Affine {
        mul: f64,
    },
    /// Hard step (or smooth surrogate) forward; surrogate derivative backward.
    Heaviside {
        kind: SurrogateKind,
    },
    Clamp {
        lo: f64,
        hi: f64,
    },
    MinMaxNorm {
        eps: f64,
    },
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// Parents: [x, gain, bias]; normalizes the last axis.
    LayerNorm {
        eps: f64,
    },
    Softmax,
    /// Concatenation along axis 0.
    Concat,
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape,
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Gradient tape with a single logical writer. Batch parallelism uses an
/// independent tape per worker; a whole tape (with its tensors) may move
/// across threads as one bundle, e.g. back to the thread that merges
/// gradients.
#[derive(Clone)]
pub struct Tape {
    nodes: Arc<RwLock<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Arc::new(RwLock::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.read().expect("tape lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Register a leaf tensor on this tape.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        check_payload("leaf", &data, &shape)?;
        let value = Arc::new(data);
        let id = self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            value: Arc::clone(&value),
            shape: shape.clone(),
            requires_grad,
        });
        Ok(Tensor {
            shape,
            data: value,
            rec: Some((self.clone(), id)),
        })
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.write().expect("tape lock");
        nodes.push(node);
        nodes.len() - 1
    }

    /// Adopt a constant tensor as a non-gradient leaf of this tape.
    fn adopt(&self, t: &Tensor) -> usize {
        self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            value: Arc::clone(&t.data),
            shape: t.shape.clone(),
            requires_grad: false,
        })
    }

    /// Reverse sweep from explicit `(tensor, seed gradient)` pairs.
    ///
    /// Nodes are visited in exact reverse recording order; gradient never
    /// accumulates into a node with `requires_grad == false`.
    pub fn backward_seeded(&self, seeds: &[(&Tensor, Vec<f64>)]) -> Result<Gradients> {
        let nodes = self.nodes.read().expect("tape lock");
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (t, seed) in seeds {
            let (tape, id) = t
                .rec
                .as_ref()
                .ok_or_else(|| Error::contract("backward seed tensor is not on a tape"))?;
            if !self.same_tape(tape) {
                return Err(Error::contract("backward seed tensor is on a different tape"));
            }
            if seed.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "backward_seeded",
                    left: t.shape.clone(),
                    right: vec![seed.len()],
                });
            }
            accumulate(&mut grads[*id], seed, seed.len());
        }

        for id in (0..nodes.len()).rev() {
            let Some(gy) = grads[id].clone() else { continue };
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            backward_op(node, &gy, &nodes, &mut grads);
        }

        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the seeded outputs w.r.t. `t`, if any flowed.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let (_, id) = t.rec.as_ref()?;
        self.grads.get(*id)?.as_deref()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64], len: usize) {
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => {
            let mut g = vec![0.0; len];
            g.copy_from_slice(delta);
            *slot = Some(g);
        }
    }
}

// ── Tensor ───────────────────────────────────────────────────────────

/// Immutable dense tensor; may carry a tape node for gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    rec: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .field("recorded", &self.rec.is_some())
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_payload(op: &'static str, data: &[f64], shape: &[usize]) -> Result<()> {
    if numel_of(shape) != data.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![data.len()],
        });
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (no tape).
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        check_payload("tensor_new", &data, &shape)?;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            rec: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], vec![1]).expect("scalar")
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::new(vec![0.0; n], shape).expect("zeros")
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::new(vec![v; n], shape).expect("filled")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_recorded(&self) -> bool {
        self.rec.is_some()
    }

    pub fn requires_grad(&self) -> bool {
        match &self.rec {
            Some((tape, id)) => tape.nodes.read().expect("tape lock")[*id].requires_grad,
            None => false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convenience scalar backward; see [`Tape::backward`].
    pub fn backward(&self) -> Result<Gradients> {
        let (tape, _) = self
            .rec
            .as_ref()
            .ok_or_else(|| Error::contract("backward on a tensor without a tape"))?;
        tape.backward(self)
    }
}

/// Resolve the tape shared by the operands, if any.
fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.rec {
            match &found {
                None => found = Some(tape.clone()),
                Some(existing) if existing.same_tape(tape) => {}
                Some(_) => {
                    return Err(Error::contract("operands recorded on different tapes"));
                }
            }
        }
    }
    Ok(found)
}

/// Record an op node (lifting constant inputs as non-grad leaves) or return
/// a plain constant when no operand is taped.
fn emit(op: Op, inputs: &[&Tensor], data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
    let value = Arc::new(data);
    match common_tape(inputs)? {
        None => Ok(Tensor {
            shape,
            data: value,
            rec: None,
        }),
        Some(tape) => {
            let parents: Vec<usize> = inputs
                .iter()
                .map(|t| match &t.rec {
                    Some((_, id)) => *id,
                    None => tape.adopt(t),
                })
                .collect();
            let requires = {
                let nodes = tape.nodes.read().expect("tape lock");
                parents.iter().any(|p| nodes[*p].requires_grad)
            };
            let id = tape.push(Node {
                op,
                parents,
                value: Arc::clone(&value),
                shape: shape.clone(),
                requires_grad: requires,
            });
            Ok(Tensor {
                shape,
                data: value,
                rec: Some((tape, id)),
            })
        }
    }
}

// ── Broadcasting helpers ─────────────────────────────────────────────

/// How the smaller operand of an elementwise binary op maps onto the larger:
/// identical shapes, a single scalar, or a trailing-suffix block that repeats
/// along the leading axes.
fn bin_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, bool)> {
    if a == b {
        return Ok((a.to_vec(), false));
    }
    let (na, nb) = (numel_of(a), numel_of(b));
    if nb == 1 || is_suffix(b, a) {
        return Ok((a.to_vec(), false));
    }
    if na == 1 || is_suffix(a, b) {
        return Ok((b.to_vec(), true));
    }
    Err(Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (out_shape, b_hosts) = bin_shapes(op, &a.shape, &b.shape)?;
    let n = numel_of(&out_shape);
    let mut out = vec![0.0; n];
    if b_hosts {
        let small = a.numel();
        for i in 0..n {
            out[i] = f(a.data[i % small], b.data[i]);
        }
    } else {
        let small = b.numel();
        for i in 0..n {
            out[i] = f(a.data[i], b.data[i % small]);
        }
    }
    Ok((out, out_shape))
}

/// Fold `grad` (shaped like the broadcast output) back onto an operand with
/// `small` elements repeating as a suffix block.
fn reduce_to_suffix(grad: &[f64], small: usize) -> Vec<f64> {
    let mut out = vec![0.0; small];
    for (i, g) in grad.iter().enumerate() {
        out[i % small] += g;
    }
    out
}

// ── Matmul internals ─────────────────────────────────────────────────

fn batch_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Offset of batch index `flat` (over `out_batch`) inside an operand whose
/// own batch shape is `own` (right-aligned, 1s broadcast).
fn batch_offset(flat: usize, out_batch: &[usize], own: &[usize], block: usize) -> usize {
    let mut rem = flat;
    let mut offset = 0usize;
    let mut own_stride = vec![0usize; own.len()];
    {
        let mut s = block;
        for i in (0..own.len()).rev() {
            own_stride[i] = s;
            s *= own[i];
        }
    }
    for i in (0..out_batch.len()).rev() {
        let idx = rem % out_batch[i];
        rem /= out_batch[i];
        let own_i = i as isize - (out_batch.len() as isize - own.len() as isize);
        if own_i >= 0 {
            let oi = own_i as usize;
            if own[oi] != 1 {
                offset += idx * own_stride[oi];
            }
        }
    }
    offset
}

/// Batched matrix product with numpy-style leading-batch broadcasting.
fn bmm(a: &[f64], ash: &[usize], b: &[f64], bsh: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: ash.to_vec(),
            right: bsh.to_vec(),
        });
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: ash.to_vec(),
            right: bsh.to_vec(),
        });
    }
    let a_batch = &ash[..ash.len() - 2];
    let b_batch = &bsh[..bsh.len() - 2];
    let out_batch = batch_broadcast("matmul", a_batch, b_batch)?;
    let batches = numel_of(&out_batch);
    let mut out_shape = out_batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let ao = batch_offset(bi, &out_batch, a_batch, m * k);
        let bo = batch_offset(bi, &out_batch, b_batch, k * n);
        let co = bi * m * n;
        for i in 0..m {
            for p in 0..k {
                let av = a[ao + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = bo + p * n;
                let crow = co + i * n;
                for j in 0..n {
                    out[crow + j] += av * b[brow + j];
                }
            }
        }
    }
    Ok((out, out_shape))
}

fn transpose_last(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    debug_assert!(rank >= 2);
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let batches = numel_of(&shape[..rank - 2]);
    let mut out = vec![0.0; data.len()];
    for b in 0..batches {
        let o = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[o + j * r + i] = data[o + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(rank - 2, rank - 1);
    (out, out_shape)
}

/// Sum `grad` (shaped `grad_batch ++ tail`) down to `own_batch ++ tail`.
fn reduce_batch(grad: &[f64], grad_batch: &[usize], own_batch: &[usize], block: usize) -> Vec<f64> {
    if grad_batch == own_batch {
        return grad.to_vec();
    }
    let own_n = numel_of(own_batch) * block;
    let mut out = vec![0.0; own_n];
    let batches = numel_of(grad_batch);
    for bi in 0..batches {
        let oo = batch_offset(bi, grad_batch, own_batch, block);
        let go = bi * block;
        for j in 0..block {
            out[oo + j] += grad[go + j];
        }
    }
    out
}

// ── Axis reductions ──────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let n = shape[axis];
    let inner = numel_of(&shape[axis + 1..]);
    (outer, n, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::IndexOutOfRange {
            op,
            index: axis,
            shape: shape.to_vec(),
        });
    }
    if shape[axis] == 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![0],
        });
    }
    Ok(())
}

// ── Public operations ────────────────────────────────────────────────

impl Tensor {
    /// Batched matrix product `[..., i, k] x [..., k, j] -> [..., i, j]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, shape) = bmm(&self.data, &self.shape, &rhs.data, &rhs.shape)?;
        emit(Op::Matmul, &[self, rhs], out, shape)
    }

    /// Swap the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (out, shape) = transpose_last(&self.data, &self.shape);
        emit(Op::TransposeLast, &[self], out, shape)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, shape) = broadcast_binary("add", self, rhs, |a, b| a + b)?;
        emit(Op::Add, &[self, rhs], out, shape)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, shape) = broadcast_binary("sub", self, rhs, |a, b| a - b)?;
        emit(Op::Sub, &[self, rhs], out, shape)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, shape) = broadcast_binary("mul", self, rhs, |a, b| a * b)?;
        emit(Op::Mul, &[self, rhs], out, shape)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, shape) = broadcast_binary("div", self, rhs, |a, b| a / b)?;
        emit(Op::Div, &[self, rhs], out, shape)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| -v).collect();
        emit(Op::Neg, &[self], out, self.shape.clone())
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v.exp()).collect();
        emit(Op::Exp, &[self], out, self.shape.clone())
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
        emit(Op::Log, &[self], out, self.shape.clone())
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| sigmoid(*v)).collect();
        emit(Op::Sigmoid, &[self], out, self.shape.clone())
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v.max(0.0)).collect();
        emit(Op::Relu, &[self], out, self.shape.clone())
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        for v in self.data.iter() {
            if *v < 0.0 {
                return Err(Error::NumericDomain {
                    op: "sqrt",
                    detail: format!("negative input {v}"),
                });
            }
        }
        let out = self.data.iter().map(|v| v.sqrt()).collect();
        emit(Op::Sqrt, &[self], out, self.shape.clone())
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let out = self.data.iter().map(|v| mul * v + add).collect();
        emit(Op::Affine { mul }, &[self], out, self.shape.clone())
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.affine(c, 0.0)
    }

    pub fn shift(&self, c: f64) -> Result<Tensor> {
        self.affine(1.0, c)
    }

    /// Hard step forward (1 where `x >= 0`), surrogate derivative backward.
    /// With `smooth`, the forward is the surrogate itself so central finite
    /// differences of the forward match the recorded gradient.
    pub fn heaviside(&self, kind: SurrogateKind, smooth: bool) -> Result<Tensor> {
        let out = self
            .data
            .iter()
            .map(|v| {
                if smooth {
                    kind.smooth(*v)
                } else if *v >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        emit(Op::Heaviside { kind }, &[self], out, self.shape.clone())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v.clamp(lo, hi)).collect();
        emit(Op::Clamp { lo, hi }, &[self], out, self.shape.clone())
    }

    /// Min-max normalization onto `(eps, 1]`; a constant tensor maps to all
    /// ones (zero gradient).
    pub fn minmax_norm(&self, eps: f64) -> Result<Tensor> {
        let (mn, mx) = min_max(&self.data);
        let out = if mx - mn < MINMAX_DEGENERATE {
            vec![1.0; self.numel()]
        } else {
            let k = (1.0 - eps) / (mx - mn);
            self.data.iter().map(|v| eps + k * (v - mn)).collect()
        };
        emit(Op::MinMaxNorm { eps }, &[self], out, self.shape.clone())
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let out = vec![self.data.iter().sum::<f64>()];
        emit(Op::Sum { axis: None }, &[self], out, vec![1])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum", &self.shape, axis)?;
        let (out, shape) = reduce_axis(&self.data, &self.shape, axis, false);
        emit(Op::Sum { axis: Some(axis) }, &[self], out, shape)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean",
                left: self.shape.clone(),
                right: vec![0],
            });
        }
        let out = vec![self.data.iter().sum::<f64>() / self.numel() as f64];
        emit(Op::Mean { axis: None }, &[self], out, vec![1])
    }

    /// Average pooling over one axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_pool", &self.shape, axis)?;
        let (out, shape) = reduce_axis(&self.data, &self.shape, axis, true);
        emit(Op::Mean { axis: Some(axis) }, &[self], out, shape)
    }

    /// Normalize the last axis to zero mean / unit variance, then apply a
    /// learnable gain and bias (both shaped like the last axis).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let d = self.shape[rank - 1];
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: vec![d],
                right: gain.shape.clone(),
            });
        }
        if d == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: vec![0],
            });
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &self.data[r * d..(r + 1) * d];
            let (mu, inv_sigma) = row_stats(row, LAYER_NORM_EPS);
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv_sigma * gain.data[j] + bias.data[j];
            }
        }
        emit(
            Op::LayerNorm { eps: LAYER_NORM_EPS },
            &[self, gain, bias],
            out,
            self.shape.clone(),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let rank = self.shape.len();
        if rank == 0 || self.shape[rank - 1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let d = self.shape[rank - 1];
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &self.data[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                out[r * d + j] /= z;
            }
        }
        emit(Op::Softmax, &[self], out, self.shape.clone())
    }

    /// Concatenate along axis 0; trailing shapes must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let tail = &parts[0].shape[1..];
        let mut rows = 0usize;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut out = Vec::with_capacity(numel_of(&shape));
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        emit(Op::Concat, parts, out, shape)
    }

    /// Slice `len` entries along `axis` starting at `start` (copying).
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("slice", &self.shape, axis)?;
        if start + len > self.shape[axis] {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + len,
                shape: self.shape.clone(),
            });
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        emit(Op::Slice { axis, start, len }, &[self], out, shape)
    }

    /// Row `i` of a rank >= 1 tensor, with the leading axis dropped.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let sliced = self.slice(0, i, 1)?;
        let tail: Vec<usize> = self.shape[1..].to_vec();
        if tail.is_empty() {
            sliced.reshape(vec![1])
        } else {
            sliced.reshape(tail)
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        let out = self.data.to_vec();
        emit(Op::Reshape, &[self], out, shape)
    }
}

const MINMAX_DEGENERATE: f64 = 1e-12;

fn min_max(data: &[f64]) -> (f64, f64) {
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for v in data {
        mn = mn.min(*v);
        mx = mx.max(*v);
    }
    (mn, mx)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

fn reduce_axis(data: &[f64], shape: &[usize], axis: usize, mean: bool) -> (Vec<f64>, Vec<usize>) {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let base = o * n * inner + j * inner;
            for i in 0..inner {
                out[o * inner + i] += data[base + i];
            }
        }
    }
    if mean {
        let inv = 1.0 / n as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    (out, out_shape)
}

// ── Backward rules ───────────────────────────────────────────────────

fn backward_op(node: &Node, gy: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let parent_val = |i: usize| -> &Node { &nodes[node.parents[i]] };
    let mut push = |slot: usize, delta: Vec<f64>| {
        let pid = node.parents[slot];
        if nodes[pid].requires_grad {
            accumulate(&mut grads[pid], &delta, delta.len());
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Matmul => {
            let a = parent_val(0);
            let b = parent_val(1);
            let (bt, bts) = transpose_last(&b.value, &b.shape);
            let (da_full, da_shape) = bmm(gy, &node.shape, &bt, &bts).expect("matmul bwd A");
            let a_batch = &a.shape[..a.shape.len() - 2];
            let da = reduce_batch(
                &da_full,
                &da_shape[..da_shape.len() - 2],
                a_batch,
                a.shape[a.shape.len() - 2] * a.shape[a.shape.len() - 1],
            );
            push(0, da);
            let (at, ats) = transpose_last(&a.value, &a.shape);
            let (db_full, db_shape) = bmm(&at, &ats, gy, &node.shape).expect("matmul bwd B");
            let b_batch = &b.shape[..b.shape.len() - 2];
            let db = reduce_batch(
                &db_full,
                &db_shape[..db_shape.len() - 2],
                b_batch,
                b.shape[b.shape.len() - 2] * b.shape[b.shape.len() - 1],
            );
            push(1, db);
        }
        Op::TransposeLast => {
            let (dx, _) = transpose_last(gy, &node.shape);
            push(0, dx);
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let a = parent_val(0);
            let b = parent_val(1);
            let na = numel_of(&a.shape);
            let nb = numel_of(&b.shape);
            let n = gy.len();
            let mut da = vec![0.0; n];
            let mut db = vec![0.0; n];
            for i in 0..n {
                let av = a.value[i % na];
                let bv = b.value[i % nb];
                let g = gy[i];
                match node.op {
                    Op::Add => {
                        da[i] = g;
                        db[i] = g;
                    }
                    Op::Sub => {
                        da[i] = g;
                        db[i] = -g;
                    }
                    Op::Mul => {
                        da[i] = g * bv;
                        db[i] = g * av;
                    }
                    Op::Div => {
                        da[i] = g / bv;
                        db[i] = -g * av / (bv * bv);
                    }
                    _ => unreachable!(),
                }
            }
            push(0, if na == n { da } else { reduce_to_suffix(&da, na) });
            push(1, if nb == n { db } else { reduce_to_suffix(&db, nb) });
        }
        Op::Neg => push(0, gy.iter().map(|g| -g).collect()),
        Op::Exp => {
            // node.value already holds exp(x)
            push(0, gy.iter().zip(node.value.iter()).map(|(g, y)| g * y).collect());
        }
        Op::Log => {
            let x = parent_val(0);
            push(
                0,
                gy.iter()
                    .zip(x.value.iter())
                    .map(|(g, v)| if *v > LOG_CLAMP { g / v } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sigmoid => {
            push(
                0,
                gy.iter()
                    .zip(node.value.iter())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            );
        }
        Op::Relu => {
            let x = parent_val(0);
            push(
                0,
                gy.iter()
                    .zip(x.value.iter())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sqrt => {
            push(
                0,
                gy.iter()
                    .zip(node.value.iter())
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
            );
        }
        Op::Affine { mul, .. } => push(0, gy.iter().map(|g| g * mul).collect()),
        Op::Heaviside { kind, .. } => {
            let x = parent_val(0);
            push(
                0,
                gy.iter()
                    .zip(x.value.iter())
                    .map(|(g, v)| g * kind.derivative(*v))
                    .collect(),
            );
        }
        Op::Clamp { lo, hi } => {
            let x = parent_val(0);
            push(
                0,
                gy.iter()
                    .zip(x.value.iter())
                    .map(|(g, v)| if *v > *lo && *v < *hi { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::MinMaxNorm { eps } => {
            let x = parent_val(0);
            let (mn, mx) = min_max(&x.value);
            if mx - mn < MINMAX_DEGENERATE {
                return; // constant input: zero gradient
            }
            let imin = x.value.iter().position(|v| *v == mn).unwrap();
            let imax = x.value.iter().position(|v| *v == mx).unwrap();
            let k = (1.0 - eps) / (mx - mn);
            let sum_g: f64 = gy.iter().sum();
            let sum_gx: f64 = gy
                .iter()
                .zip(x.value.iter())
                .map(|(g, v)| g * (v - mn))
                .sum();
            let mut dx = vec![0.0; gy.len()];
            for j in 0..gy.len() {
                dx[j] = k * gy[j];
            }
            dx[imin] -= k * sum_g;
            let q = k / (mx - mn) * sum_gx;
            dx[imax] -= q;
            dx[imin] += q;
            push(0, dx);
        }
        Op::Sum { axis } => {
            let x = parent_val(0);
            match axis {
                None => push(0, vec![gy[0]; numel_of(&x.shape)]),
                Some(ax) => push(0, expand_axis(gy, &x.shape, *ax, 1.0)),
            }
        }
        Op::Mean { axis } => {
            let x = parent_val(0);
            match axis {
                None => {
                    let inv = 1.0 / numel_of(&x.shape) as f64;
                    push(0, vec![gy[0] * inv; numel_of(&x.shape)]);
                }
                Some(ax) => {
                    let inv = 1.0 / x.shape[*ax] as f64;
                    push(0, expand_axis(gy, &x.shape, *ax, inv));
                }
            }
        }
        Op::LayerNorm { eps } => {
            let x = parent_val(0);
            let gain = parent_val(1);
            let d = *x.shape.last().unwrap();
            let rows = numel_of(&x.shape) / d;
            let mut dx = vec![0.0; x.value.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let (mu, inv_sigma) = row_stats(row, *eps);
                let gyr = &gy[r * d..(r + 1) * d];
                let mut mean_dyg = 0.0;
                let mut mean_dyg_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mu) * inv_sigma;
                    let dyg = gyr[j] * gain.value[j];
                    mean_dyg += dyg;
                    mean_dyg_xhat += dyg * xhat;
                    dgain[j] += gyr[j] * xhat;
                    dbias[j] += gyr[j];
                }
                mean_dyg /= d as f64;
                mean_dyg_xhat /= d as f64;
                for j in 0..d {
                    let xhat = (row[j] - mu) * inv_sigma;
                    let dyg = gyr[j] * gain.value[j];
                    dx[r * d + j] = inv_sigma * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                }
            }
            push(0, dx);
            push(1, dgain);
            push(2, dbias);
        }
        Op::Softmax => {
            let d = *node.shape.last().unwrap();
            let rows = node.value.len() / d;
            let mut dx = vec![0.0; node.value.len()];
            for r in 0..rows {
                let y = &node.value[r * d..(r + 1) * d];
                let g = &gy[r * d..(r + 1) * d];
                let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                for j in 0..d {
                    dx[r * d + j] = y[j] * (g[j] - dot);
                }
            }
            push(0, dx);
        }
        Op::Concat => {
            let mut offset = 0usize;
            for slot in 0..node.parents.len() {
                let p = parent_val(slot);
                let n = numel_of(&p.shape);
                push(slot, gy[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::Slice { axis, start, len } => {
            let x = parent_val(0);
            let (outer, n, inner) = axis_split(&x.shape, *axis);
            let mut dx = vec![0.0; numel_of(&x.shape)];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * n * inner + start * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
            }
            push(0, dx);
        }
        Op::Reshape => push(0, gy.to_vec()),
    }
}

fn expand_axis(gy: &[f64], shape: &[usize], axis: usize, scale: f64) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; numel_of(shape)];
    for o in 0..outer {
        for j in 0..n {
            let base = o * n * inner + j * inner;
            for i in 0..inner {
                dx[base + i] = gy[o * inner + i] * scale;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(data: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::new(data.to_vec(), vec![r, c]).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let a = t2(&[3.0, 4.0, 5.0, 6.0], 2, 2);
        let i = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let c = i.matmul(&a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let a = t2(&[1.0, 2.0], 1, 2);
        let b = t2(&[3.0, 4.0], 2, 1);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let a = t2(&[1.0, 2.0], 1, 2);
        let b = t2(&[1.0, 2.0, 3.0], 3, 1);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_leading_batch_broadcast() {
        // [2,2,2] x [2,2] broadcasts the rhs over the batch.
        let a = Tensor::new((1..=8).map(|v| v as f64).collect(), vec![2, 2, 2]).unwrap();
        let b = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::scalar(0.0);
        assert_eq!(x.sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn exp_of_zero_is_one() {
        assert_eq!(Tensor::scalar(0.0).exp().unwrap().item(), 1.0);
    }

    #[test]
    fn mean_pool_axis0() {
        let x = Tensor::new(vec![2.0, 4.0, 6.0], vec![3]).unwrap();
        assert_eq!(x.mean_axis(0).unwrap().item(), 4.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let x = Tensor::new(vec![5.0; 4], vec![4]).unwrap();
        let g = Tensor::filled(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let y = x.layer_norm(&g, &b).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heaviside_sign_rule_inclusive_zero() {
        let x = Tensor::new(vec![-0.1, 0.0, 0.2], vec![3]).unwrap();
        let y = x.heaviside(SurrogateKind::default(), false).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn surrogate_backward_at_zero_is_alpha_quarter() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0], vec![1], true).unwrap();
        let y = x.heaviside(SurrogateKind::Sigmoid { alpha: 4.0 }, false).unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0]);
    }

    #[test]
    fn heaviside_forward_is_binary() {
        let x = Tensor::new(vec![-2.5, -0.0, 0.0, 1e-12, 3.0], vec![5]).unwrap();
        let y = x.heaviside(SurrogateKind::default(), false).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn no_grad_leaf_never_accumulates() {
        let tape = Tape::new();
        let w = tape.leaf(vec![2.0], vec![1], true).unwrap();
        let c = tape.leaf(vec![3.0], vec![1], false).unwrap();
        let y = w.mul(&c).unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.wrt(&w).unwrap(), &[3.0]);
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn suffix_broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true)
            .unwrap();
        let b = tape.leaf(vec![10.0, 20.0], vec![2], true).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.wrt(&b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_extent_axis_is_rejected() {
        let x = Tensor::new(vec![], vec![0, 3]).unwrap();
        assert!(x.mean_axis(0).is_err());
    }

    #[test]
    fn log_clamps_at_floor() {
        let x = Tensor::new(vec![0.0], vec![1]).unwrap();
        let y = x.log().unwrap();
        assert!((y.item() - LOG_CLAMP.ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let b = tape.leaf(vec![3.0, 4.0], vec![1, 2], true).unwrap();
        let cat = Tensor::concat0(&[&a, &b]).unwrap();
        let row1 = cat.slice(0, 1, 1).unwrap();
        let loss = row1.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn minmax_norm_constant_maps_to_ones() {
        let x = Tensor::new(vec![0.7; 5], vec![5]).unwrap();
        let y = x.minmax_norm(MINMAX_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn minmax_norm_range() {
        let x = Tensor::new(vec![-1.0, 0.0, 3.0], vec![3]).unwrap();
        let y = x.minmax_norm(MINMAX_EPS).unwrap();
        assert!((y.data()[0] - MINMAX_EPS).abs() < 1e-15);
        assert!((y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn different_tapes_refuse_to_mix() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(vec![1.0], vec![1], true).unwrap();
        let b = t2.leaf(vec![1.0], vec![1], true).unwrap();
        assert!(a.add(&b).is_err());
    }
}
