//! Dense n-D float tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value holding row-major `f64` data plus the
//! op record that produced it, so the computation graph is the DAG of tensor
//! handles. Calling [`Tensor::backward`] on a scalar traverses that DAG in
//! reverse topological order and accumulates gradients on every
//! `requires_grad` leaf.
//!
//! Every op checks its output for NaN/Inf and fails loudly, and every op's
//! backward pass is validated against central finite differences (see
//! [`gradcheck`]).
//!
//! Parameters are the only mutable tensors: the optimizer and the gradient
//! checker overwrite leaf data in place between graph constructions.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, op_gradcheck_cases, OpCase};
pub use ops::Padding;
#[doc(hidden)]
pub use ops::set_gather_backward_corruption;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Element precision. Data is always stored as `f64`; in `F32` mode every op
/// output is rounded through `f32`, so values carry single precision while
/// the oracle-facing default stays double.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Op record attached to each non-leaf tensor. Saved context (stride,
/// padding, pool argmax, reduction axes) lives inline.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Affine { x: Tensor, mul: f64 },
    Relu(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Ln(Tensor),
    Clamp { x: Tensor, lo: f64, hi: f64 },
    ClampCoords { x: Tensor, max_row: f64, max_col: f64 },
    MatMul(Tensor, Tensor),
    Conv2d { x: Tensor, kernel: Tensor, bias: Tensor, stride: usize, padding: Padding },
    MaxPool2 { x: Tensor, argmax: Rc<Vec<u32>> },
    BilinearResize { x: Tensor, out_h: usize, out_w: usize },
    L2Normalize { x: Tensor, eps: f64 },
    Gather { src: Tensor, coords: Tensor },
    Permute { x: Tensor, axes: Vec<usize> },
    Reshape { x: Tensor },
    Concat { xs: Vec<Tensor>, axis: usize },
    SumAxes { x: Tensor, axes: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Ln(x)
            | Op::Clamp { x, .. }
            | Op::ClampCoords { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::BilinearResize { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::SumAxes { x, .. } => vec![x],
            Op::Conv2d { x, kernel, bias, .. } => vec![x, kernel, bias],
            Op::Gather { src, coords } => vec![src, coords],
            Op::Concat { xs, .. } => xs.iter().collect(),
        }
    }

    pub(crate) fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Ln(..) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::ClampCoords { .. } => "clamp_coords",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BilinearResize { .. } => "bilinear_resize",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Gather { .. } => "gather",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::SumAxes { .. } => "sum_axes",
        }
    }
}

/// Every differentiable op kind, used by the gradient-check registry to
/// guarantee one case per op.
pub const ALL_OP_KINDS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "affine",
    "relu",
    "sigmoid",
    "tanh",
    "ln",
    "clamp",
    "clamp_coords",
    "matmul",
    "conv2d",
    "maxpool2",
    "bilinear_resize",
    "l2_normalize",
    "gather",
    "permute",
    "reshape",
    "concat",
    "sum_axes",
];

struct Inner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    /// Shared buffer: shape-only ops (reshape) alias their input's data.
    data: Rc<RefCell<Vec<f64>>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Dense n-D float tensor; cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={}, grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.dtype.name(),
            self.inner.requires_grad
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn quantize_f32(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// True iff every value is finite. `v * 0.0` is 0 for finite values and NaN
/// for NaN/Inf, so the sum is 0 exactly when everything is finite; the loop
/// vectorizes, unlike an early-exit scan.
pub(crate) fn all_finite(data: &[f64]) -> bool {
    let probe: f64 = data.iter().map(|v| v * 0.0).sum();
    probe == 0.0
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        dtype: DType,
        mut data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        if dtype == DType::F32 {
            quantize_f32(&mut data);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data: Rc::new(RefCell::new(data)),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Shape-only op sharing the input's buffer (no copy, no re-scan).
    pub(crate) fn from_op_shared(shape: Vec<usize>, dtype: DType, source: &Tensor, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data: Rc::clone(&source.inner.data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, dtype: DType, data: Vec<f64>, op: Op) -> Result<Tensor> {
        let name = op.kind_name();
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        Ok(Tensor::new_inner(shape, dtype, data, requires_grad, op))
    }

    /// Constant leaf tensor (f64, no gradient).
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec_dtype(shape, data, DType::F64)
    }

    pub fn from_vec_dtype(
        shape: impl Into<Vec<usize>>,
        data: Vec<f64>,
        dtype: DType,
    ) -> Result<Tensor> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::new_inner(shape, dtype, data, false, Op::Leaf))
    }

    /// Trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>, dtype: DType) -> Result<Tensor> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "param" });
        }
        Ok(Tensor::new_inner(shape, dtype, data, true, Op::Leaf))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, dtype: DType) -> Tensor {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor::new_inner(shape, dtype, vec![0.0; n], false, Op::Leaf)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64, dtype: DType) -> Tensor {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor::new_inner(shape, dtype, vec![value; n], false, Op::Leaf)
    }

    pub fn scalar_value(value: f64, dtype: DType) -> Tensor {
        Tensor::new_inner(vec![1], dtype, vec![value], false, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "scalar",
                format!("expected 1 element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite leaf data in place (optimizer step, gradient probing).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("set_data is only valid on leaf tensors"));
        }
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        let mut d = data;
        if self.dtype() == DType::F32 {
            quantize_f32(&mut d);
        }
        *self.inner.data.borrow_mut() = d;
        Ok(())
    }

    /// Overwrite a single leaf entry; used by the finite-difference prober.
    pub fn set_entry(&self, idx: usize, value: f64) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("set_entry is only valid on leaf tensors"));
        }
        let mut d = self.inner.data.borrow_mut();
        if idx >= d.len() {
            return Err(Error::invalid(format!("entry {idx} out of range")));
        }
        d[idx] = if self.dtype() == DType::F32 { value as f32 as f64 } else { value };
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    /// Reverse-mode backward from a scalar; accumulates gradients on every
    /// reachable `requires_grad` leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            // Nothing reachable wants a gradient.
            return Ok(());
        }
        let graph = Graph::trace(self);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.order.len()];
        let root_idx = graph.order.len() - 1;
        grads[root_idx] = Some(vec![1.0]);

        for idx in (0..graph.order.len()).rev() {
            let node = &graph.order[idx];
            let grad_out = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if node.is_leaf() {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(existing) => {
                        for (e, g) in existing.iter_mut().zip(&grad_out) {
                            *e += g;
                        }
                    }
                    None => *slot = Some(grad_out),
                }
                continue;
            }
            // Shape-only ops pass their gradient through without copying.
            if let Op::Reshape { x } = node.op() {
                if x.requires_grad() {
                    let slot = graph.index[&x.id()];
                    match grads[slot].as_mut() {
                        Some(existing) => {
                            for (e, g) in existing.iter_mut().zip(&grad_out) {
                                *e += g;
                            }
                        }
                        None => grads[slot] = Some(grad_out),
                    }
                }
                continue;
            }
            let input_grads = ops::vjp(node, &grad_out)?;
            for (inp, ig) in node.op().inputs().into_iter().zip(input_grads) {
                let (Some(ig), true) = (ig, inp.requires_grad()) else {
                    continue;
                };
                let slot = graph.index[&inp.id()];
                match grads[slot].as_mut() {
                    Some(existing) => {
                        for (e, g) in existing.iter_mut().zip(&ig) {
                            *e += g;
                        }
                    }
                    None => grads[slot] = Some(ig),
                }
            }
        }
        Ok(())
    }
}

/// Reverse traversal order over the op DAG rooted at one tensor.
///
/// Only nodes that contribute gradients (`requires_grad`) are recorded; the
/// order is a topological sort, so the backward loop visits each node exactly
/// once after all of its consumers.
pub struct Graph {
    order: Vec<Tensor>,
    index: HashMap<u64, usize>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Graph {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, bool> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, processed)) = stack.pop() {
            if processed {
                order.push(node);
                continue;
            }
            if visited.contains_key(&node.id()) {
                continue;
            }
            visited.insert(node.id(), true);
            stack.push((node.clone(), true));
            for inp in node.op().inputs() {
                if inp.requires_grad() && !visited.contains_key(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
        let index = order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        Graph { order, index }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
