//! Op constructors and their vector-Jacobian products.

use std::cell::Cell;
use std::rc::Rc;

use super::kernels;
use super::{numel_of, DType, Op, Tensor};
use crate::error::{Error, Result};
use crate::threads;

/// Spatial padding for [`Tensor::conv2d`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Output keeps the input spatial size at stride 1 (odd kernels only).
    Same,
    /// No padding; kernel must fit inside the input.
    Valid,
}

thread_local! {
    static CORRUPT_GATHER: Cell<bool> = const { Cell::new(false) };
}

/// Test fixture: perturb the gather backward pass so the gradient checker
/// can prove it detects a broken op.
#[doc(hidden)]
pub fn set_gather_backward_corruption(on: bool) {
    CORRUPT_GATHER.with(|c| c.set(on));
}

fn gather_corrupted() -> bool {
    CORRUPT_GATHER.with(|c| c.get())
}

/// How the smaller operand of a binary elementwise op maps onto the larger:
/// its shape must equal the trailing dims of the larger (or be a single
/// element), so its index is `i % small_len`.
fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, bool, bool)> {
    if a == b {
        return Ok((a.to_vec(), false, false));
    }
    let (big, small, small_is_a) = if numel_of(a) >= numel_of(b) {
        (a, b, false)
    } else {
        (b, a, true)
    };
    let ok = numel_of(small) == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small);
    if !ok {
        return Err(Error::shape(
            op,
            format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
        ));
    }
    Ok((big.to_vec(), small_is_a, !small_is_a))
}

fn check_same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType> {
    if a.dtype() != b.dtype() {
        return Err(Error::shape(
            op,
            format!("dtype mismatch: {} vs {}", a.dtype().name(), b.dtype().name()),
        ));
    }
    Ok(a.dtype())
}

fn binary_fwd(a: &[f64], b: &[f64], out_len: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let an = a.len();
    let bn = b.len();
    let mut out = Vec::with_capacity(out_len);
    if an == out_len && bn == out_len {
        out.extend(a.iter().zip(b).map(|(x, y)| f(*x, *y)));
    } else if an == out_len {
        out.extend((0..out_len).map(|i| f(a[i], b[i % bn])));
    } else {
        out.extend((0..out_len).map(|i| f(a[i % an], b[i])));
    }
    out
}

/// Reduce a gradient of the broadcast output back to the smaller operand.
fn reduce_to(grad: &[f64], small_len: usize) -> Vec<f64> {
    if grad.len() == small_len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; small_len];
    for (i, g) in grad.iter().enumerate() {
        out[i % small_len] += g;
    }
    out
}

impl Tensor {
    fn binary(&self, other: &Tensor, op_name: &'static str, make: impl Fn(Tensor, Tensor) -> Op) -> Result<Tensor> {
        let dtype = check_same_dtype(op_name, self, other)?;
        let (out_shape, _, _) = broadcast_shapes(op_name, self.shape(), other.shape())?;
        let out_len = numel_of(&out_shape);
        let data = {
            let a = self.data();
            let b = other.data();
            match op_name {
                "add" => binary_fwd(&a, &b, out_len, |x, y| x + y),
                "sub" => binary_fwd(&a, &b, out_len, |x, y| x - y),
                "mul" => binary_fwd(&a, &b, out_len, |x, y| x * y),
                "div" => binary_fwd(&a, &b, out_len, |x, y| x / y),
                _ => unreachable!(),
            }
        };
        Tensor::from_op(out_shape, dtype, data, make(self.clone(), other.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", Op::Div)
    }

    /// `y = x * mul + add`, elementwise with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * mul + add).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            self.dtype(),
            data,
            Op::Affine { x: self.clone(), mul },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.affine(c, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.affine(1.0, c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), self.dtype(), data, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op(self.shape().to_vec(), self.dtype(), data, Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), self.dtype(), data, Op::Tanh(self.clone()))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), self.dtype(), data, Op::Ln(self.clone()))
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the
    /// range and is zero where the clamp pins the value.
    pub fn clamp_range(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("clamp range [{lo}, {hi}] is empty")));
        }
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            self.dtype(),
            data,
            Op::Clamp { x: self.clone(), lo, hi },
        )
    }

    /// Clamp a `[.., 2]` coordinate tensor: channel 0 into `[0, max_row]`,
    /// channel 1 into `[0, max_col]`. Gradient is zero where the clamp pins.
    pub fn clamp_coords(&self, max_row: f64, max_col: f64) -> Result<Tensor> {
        if self.shape().last() != Some(&2) {
            return Err(Error::shape(
                "clamp_coords",
                format!("expected trailing dim 2, got {:?}", self.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i % 2 == 0 {
                    v.clamp(0.0, max_row)
                } else {
                    v.clamp(0.0, max_col)
                }
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            self.dtype(),
            data,
            Op::ClampCoords { x: self.clone(), max_row, max_col },
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let dtype = check_same_dtype("matmul", self, other)?;
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {a_shape:?} x {b_shape:?}"),
            ));
        }
        threads::init_pool();
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let data = kernels::matmul_fwd(&self.data(), &other.data(), m, k, n);
        Tensor::from_op(vec![m, n], dtype, data, Op::MatMul(self.clone(), other.clone()))
    }

    /// Affine map on the last dim: `x [.., Cin] -> [.., Cout]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let cin = *self.shape().last().ok_or_else(|| Error::shape("linear", "rank-0 input"))?;
        if weight.shape().len() != 2 || weight.shape()[0] != cin {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} does not match input Cin {}", weight.shape(), cin),
            ));
        }
        let cout = weight.shape()[1];
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match Cout {}", bias.shape(), cout),
            ));
        }
        let m = self.numel() / cin;
        let flat = self.reshape(&[m, cin])?;
        let out = flat.matmul(weight)?.add(bias)?;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        out.reshape(&out_shape)
    }

    /// Cross-correlation over `x [B,H,W,Cin]` with `kernel [kh,kw,Cin,Cout]`
    /// and `bias [Cout]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        let dtype = check_same_dtype("conv2d", self, kernel)?;
        check_same_dtype("conv2d", self, bias)?;
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("need x rank 4 and kernel rank 4, got {xs:?} and {ks:?}"),
            ));
        }
        let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kci, co) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kci} input channels, x has {ci}"),
            ));
        }
        if bias.shape() != [co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match Cout {co}", bias.shape()),
            ));
        }
        if stride < 1 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let same = padding == Padding::Same;
        if same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::invalid("same padding requires odd kernel dims"));
        }
        if !same && (kh > h || kw > w) {
            return Err(Error::shape(
                "conv2d",
                format!("valid padding needs kernel {kh}x{kw} <= input {h}x{w}"),
            ));
        }
        threads::init_pool();
        let (oh, _) = kernels::conv_dim(h, kh, stride, same);
        let (ow, _) = kernels::conv_dim(w, kw, stride, same);
        let data = kernels::conv2d_fwd(
            &self.data(),
            &kernel.data(),
            &bias.data(),
            b,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            stride,
            same,
        );
        Tensor::from_op(
            vec![b, oh, ow, co],
            dtype,
            data,
            Op::Conv2d {
                x: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                stride,
                padding,
            },
        )
    }

    /// 2x2 max pooling with stride 2 on `[B,H,W,C]`; H and W must be even.
    pub fn maxpool2(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 || !xs[1].is_multiple_of(2) || !xs[2].is_multiple_of(2) {
            return Err(Error::shape(
                "maxpool2",
                format!("need [B,H,W,C] with even H,W, got {xs:?}"),
            ));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (data, argmax) = kernels::maxpool2_fwd(&self.data(), b, h, w, c);
        Tensor::from_op(
            vec![b, h / 2, w / 2, c],
            self.dtype(),
            data,
            Op::MaxPool2 { x: self.clone(), argmax: Rc::new(argmax) },
        )
    }

    /// Bilinear resize of the two spatial dims of `[..., H, W, C]`, sample
    /// centers at `(i + 0.5) * in/out - 0.5` clamped into range.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 3 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("need rank >= 3 [..,H,W,C], got {xs:?}"),
            ));
        }
        if out_h < 1 || out_w < 1 {
            return Err(Error::invalid("resize target dims must be >= 1"));
        }
        let rank = xs.len();
        let (h, w, c) = (xs[rank - 3], xs[rank - 2], xs[rank - 1]);
        let mut out_shape = xs.to_vec();
        out_shape[rank - 3] = out_h;
        out_shape[rank - 2] = out_w;
        if out_h == h && out_w == w {
            // Identity resize is exact by contract; share the buffer.
            return Ok(Tensor::from_op_shared(
                out_shape,
                self.dtype(),
                self,
                Op::BilinearResize { x: self.clone(), out_h, out_w },
            ));
        }
        threads::init_pool();
        let b: usize = xs[..rank - 3].iter().product();
        let data = kernels::resize_fwd(&self.data(), b.max(1), h, w, c, out_h, out_w);
        Tensor::from_op(
            out_shape,
            self.dtype(),
            data,
            Op::BilinearResize { x: self.clone(), out_h, out_w },
        )
    }

    /// Normalize each last-dim vector by `max(l2_norm, eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::invalid("l2_normalize eps must be > 0"));
        }
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        threads::init_pool();
        let data = kernels::l2norm_fwd(&self.data(), c, eps);
        Tensor::from_op(
            self.shape().to_vec(),
            self.dtype(),
            data,
            Op::L2Normalize { x: self.clone(), eps },
        )
    }

    /// Bilinear point sampling: `src [B,H,W,C]` at `coords [B,M,2]` (row,
    /// col), out-of-range coordinates clamped. Gradients flow to both the
    /// source values and the coordinates.
    pub fn gather(&self, coords: &Tensor) -> Result<Tensor> {
        check_same_dtype("gather", self, coords)?;
        let ss = self.shape();
        let cs = coords.shape();
        if ss.len() != 4 || cs.len() != 3 || cs[2] != 2 || cs[0] != ss[0] {
            return Err(Error::shape(
                "gather",
                format!("need src [B,H,W,C] and coords [B,M,2], got {ss:?} and {cs:?}"),
            ));
        }
        // NaN coordinates are rejected up front; from_op only sees outputs.
        if !coords.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "gather" });
        }
        threads::init_pool();
        let (b, h, w, c) = (ss[0], ss[1], ss[2], ss[3]);
        let m = cs[1];
        let data = kernels::gather_fwd(&self.data(), &coords.data(), b, h, w, c, m);
        Tensor::from_op(
            vec![b, m, c],
            self.dtype(),
            data,
            Op::Gather { src: self.clone(), coords: coords.clone() },
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let data = kernels::permute_fwd(&self.data(), self.shape(), axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        Tensor::from_op(
            out_shape,
            self.dtype(),
            data,
            Op::Permute { x: self.clone(), axes: axes.to_vec() },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            self.dtype(),
            self,
            Op::Reshape { x: self.clone() },
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            check_same_dtype("concat", first, p)?;
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != first.shape()[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {:?} incompatible with {:?}", p.shape(), first.shape()),
                ));
            }
            axis_total += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let views: Vec<(&[f64], usize)> = datas
            .iter()
            .zip(parts)
            .map(|(d, p)| (d.as_slice(), p.shape()[axis]))
            .collect();
        let data = kernels::concat_fwd(&views, outer, inner);
        drop(datas);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        Tensor::from_op(
            out_shape,
            first.dtype(),
            data,
            Op::Concat { xs: parts.to_vec(), axis },
        )
    }

    /// Stack tensors of identical shape along a new trailing axis.
    pub fn stack_new_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
        let mut with_axis = Vec::with_capacity(parts.len());
        let mut shape = first.shape().to_vec();
        shape.push(1);
        for p in parts {
            with_axis.push(p.reshape(&shape)?);
        }
        Tensor::concat(&with_axis, shape.len() - 1)
    }

    /// Sum-reduce the listed axes (result axes squeezed away; full reduction
    /// yields shape `[1]`).
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
            return Err(Error::shape(
                "sum_axes",
                format!("axes {axes:?} invalid for rank {rank}"),
            ));
        }
        let (data, out_shape) = kernels::sum_axes_fwd(&self.data(), self.shape(), &sorted);
        Tensor::from_op(
            out_shape,
            self.dtype(),
            data,
            Op::SumAxes { x: self.clone(), axes: sorted },
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&all)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }
}

/// Gradients of `node`'s output w.r.t. each of its op inputs, aligned with
/// `Op::inputs()` order. `None` marks an input that receives no gradient.
pub(crate) fn vjp(node: &Tensor, gout: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let op = node.op();
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            let ga = reduce_to(gout, a.numel());
            let gb = reduce_to(gout, b.numel());
            vec![Some(ga), Some(gb)]
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(gout, a.numel());
            let mut gb = vec![0.0; b.numel()];
            let bn = b.numel();
            for (i, g) in gout.iter().enumerate() {
                gb[i % bn] -= g;
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Mul(a, b) => {
            let ad = a.data();
            let bd = b.data();
            let (an, bn) = (ad.len(), bd.len());
            let mut ga = vec![0.0; an];
            let mut gb = vec![0.0; bn];
            for (i, g) in gout.iter().enumerate() {
                ga[i % an] += g * bd[i % bn];
                gb[i % bn] += g * ad[i % an];
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Div(a, b) => {
            let ad = a.data();
            let bd = b.data();
            let (an, bn) = (ad.len(), bd.len());
            let mut ga = vec![0.0; an];
            let mut gb = vec![0.0; bn];
            for (i, g) in gout.iter().enumerate() {
                let bv = bd[i % bn];
                ga[i % an] += g / bv;
                gb[i % bn] -= g * ad[i % an] / (bv * bv);
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Affine { mul, .. } => vec![Some(gout.iter().map(|g| g * mul).collect())],
        Op::Relu(x) => {
            let xd = x.data();
            vec![Some(
                gout.iter()
                    .zip(xd.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Sigmoid(_) => {
            let yd = node.data();
            vec![Some(
                gout.iter().zip(yd.iter()).map(|(g, &y)| g * y * (1.0 - y)).collect(),
            )]
        }
        Op::Tanh(_) => {
            let yd = node.data();
            vec![Some(
                gout.iter().zip(yd.iter()).map(|(g, &y)| g * (1.0 - y * y)).collect(),
            )]
        }
        Op::Ln(x) => {
            let xd = x.data();
            vec![Some(gout.iter().zip(xd.iter()).map(|(g, &v)| g / v).collect())]
        }
        Op::Clamp { x, lo, hi } => {
            let xd = x.data();
            vec![Some(
                gout.iter()
                    .zip(xd.iter())
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::ClampCoords { x, max_row, max_col } => {
            let xd = x.data();
            vec![Some(
                gout.iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let hi = if i % 2 == 0 { *max_row } else { *max_col };
                        if xd[i] >= 0.0 && xd[i] <= hi {
                            *g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )]
        }
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = kernels::matmul_bwd_a(gout, &b.data(), m, k, n);
            let gb = kernels::matmul_bwd_b(&a.data(), gout, m, k, n);
            vec![Some(ga), Some(gb)]
        }
        Op::Conv2d { x, kernel, bias, stride, padding } => {
            let xs = x.shape();
            let ks = kernel.shape();
            let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
            let (kh, kw, co) = (ks[0], ks[1], ks[3]);
            let same = *padding == Padding::Same;
            let gx = if x.requires_grad() {
                Some(kernels::conv2d_bwd_x(
                    gout,
                    &kernel.data(),
                    b,
                    h,
                    w,
                    ci,
                    kh,
                    kw,
                    co,
                    *stride,
                    same,
                ))
            } else {
                None
            };
            let gk = if kernel.requires_grad() {
                Some(kernels::conv2d_bwd_k(
                    &x.data(),
                    gout,
                    b,
                    h,
                    w,
                    ci,
                    kh,
                    kw,
                    co,
                    *stride,
                    same,
                ))
            } else {
                None
            };
            let gb = if bias.requires_grad() {
                Some(kernels::conv2d_bwd_b(gout, co))
            } else {
                None
            };
            vec![gx, gk, gb]
        }
        Op::MaxPool2 { x, argmax } => {
            vec![Some(kernels::maxpool2_bwd(gout, argmax, x.numel()))]
        }
        Op::BilinearResize { x, out_h, out_w } => {
            let xs = x.shape();
            let rank = xs.len();
            let (h, w, c) = (xs[rank - 3], xs[rank - 2], xs[rank - 1]);
            if *out_h == h && *out_w == w {
                vec![Some(gout.to_vec())]
            } else {
                let b: usize = xs[..rank - 3].iter().product();
                vec![Some(kernels::resize_bwd(gout, b.max(1), h, w, c, *out_h, *out_w))]
            }
        }
        Op::L2Normalize { x, eps } => {
            let c = *x.shape().last().unwrap();
            vec![Some(kernels::l2norm_bwd(&x.data(), gout, c, *eps))]
        }
        Op::Gather { src, coords } => {
            let ss = src.shape();
            let (b, h, w, c) = (ss[0], ss[1], ss[2], ss[3]);
            let m = coords.shape()[1];
            let (gs, gc) = kernels::gather_bwd(
                &src.data(),
                &coords.data(),
                gout,
                b,
                h,
                w,
                c,
                m,
                gather_corrupted(),
            );
            vec![Some(gs), Some(gc)]
        }
        Op::Permute { x, axes } => {
            // Gradient is the inverse permutation of the output gradient.
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
            vec![Some(kernels::permute_fwd(gout, &out_shape, &inverse))]
        }
        Op::Reshape { .. } => vec![Some(gout.to_vec())],
        Op::Concat { xs, axis } => {
            let first = &xs[0];
            let outer: usize = first.shape()[..*axis].iter().product();
            let inner: usize = first.shape()[*axis + 1..].iter().product();
            let lens: Vec<usize> = xs.iter().map(|p| p.shape()[*axis]).collect();
            kernels::concat_bwd(gout, &lens, outer, inner)
                .into_iter()
                .map(Some)
                .collect()
        }
        Op::SumAxes { x, axes } => {
            vec![Some(kernels::sum_axes_bwd(gout, x.shape(), axes))]
        }
    })
}
