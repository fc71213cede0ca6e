//! Finite-difference gradient verification.
//!
//! [`grad_check`] compares the analytic gradients of a scalar-valued
//! computation against central differences over every entry of every listed
//! parameter. [`op_gradcheck_cases`] provides one random case per registered
//! op (shapes and values drawn from the seed) so the whole op set can be
//! swept across many shapes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{DType, Padding, Tensor, ALL_OP_KINDS};
use crate::error::{Error, Result};

/// Max over all parameter entries of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
///
/// `f` must rebuild the computation from the current parameter data on every
/// call; parameters are probed in place and restored afterwards.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        if !p.is_leaf() || !p.requires_grad() {
            return Err(Error::invalid("grad_check params must be trainable leaves"));
        }
        p.zero_grad();
    }
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(Error::shape("grad_check", "loss must be scalar"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for (p, pg) in params.iter().zip(&analytic) {
        for idx in 0..p.numel() {
            let orig = p.data()[idx];
            p.set_entry(idx, orig + eps)?;
            let up = f()?.scalar()?;
            p.set_entry(idx, orig - eps)?;
            let down = f()?.scalar()?;
            p.set_entry(idx, orig)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let numeric = (up - down) / (2.0 * eps);
            let rel = (pg[idx] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// One seeded gradient-check case for a single op kind.
pub struct OpCase {
    pub name: &'static str,
    run: Box<dyn Fn() -> Result<f64>>,
}

impl OpCase {
    /// Execute the case, returning the max relative gradient error.
    pub fn run(&self) -> Result<f64> {
        (self.run)()
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random values pushed away from zero so kinked ops (relu, maxpool ties)
/// stay off their non-differentiable points during probing.
fn rand_vec_offzero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = rand_vec(rng, n, -1.0, 1.0);
    Tensor::param(shape.to_vec(), vals, DType::F64).unwrap()
}

fn param_offzero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = rand_vec_offzero(rng, n, margin);
    Tensor::param(shape.to_vec(), vals, DType::F64).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn case<F>(name: &'static str, f: F) -> OpCase
where
    F: Fn() -> Result<f64> + 'static,
{
    OpCase { name, run: Box::new(f) }
}

/// One gradient-check case per registered op kind; shapes and values are
/// drawn from `seed`, so sweeping seeds sweeps shapes.
///
/// Each case wraps the op under test into a scalar loss (squares plus sum)
/// so the op's own backward is exercised through a generic chain.
pub fn op_gradcheck_cases(seed: u64) -> Vec<OpCase> {
    let eps = 1e-5;
    let mut cases: Vec<OpCase> = Vec::new();
    let mk_rng = move |salt: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9) ^ salt);

    cases.push(case("add", move || {
        let mut rng = mk_rng(1);
        let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
        let a = param(&mut rng, &[m, n]);
        let b = param(&mut rng, &[n]);
        grad_check(|| a.add(&b)?.mul(&a.add(&b)?)?.sum_all(), &[a.clone(), b.clone()], eps)
    }));
    cases.push(case("sub", move || {
        let mut rng = mk_rng(2);
        let (m, n, k) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let a = param(&mut rng, &[m, n, k]);
        let b = param(&mut rng, &[k]);
        grad_check(|| a.sub(&b)?.mul(&a.sub(&b)?)?.sum_all(), &[a.clone(), b.clone()], eps)
    }));
    cases.push(case("mul", move || {
        let mut rng = mk_rng(3);
        let (m, n) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 6));
        let a = param(&mut rng, &[m, n]);
        let b = param(&mut rng, &[n]);
        grad_check(|| a.mul(&b)?.sum_all(), &[a.clone(), b.clone()], eps)
    }));
    cases.push(case("div", move || {
        let mut rng = mk_rng(4);
        let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let a = param(&mut rng, &[m, n]);
        // Divisor kept away from zero.
        let b = param_offzero(&mut rng, &[n], 0.4);
        grad_check(|| a.div(&b)?.sum_all(), &[a.clone(), b.clone()], eps)
    }));
    cases.push(case("affine", move || {
        let mut rng = mk_rng(5);
        let n = dim(&mut rng, 2, 8);
        let a = param(&mut rng, &[n]);
        let (mul, add) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
        grad_check(|| a.affine(mul, add)?.mul(&a)?.sum_all(), std::slice::from_ref(&a), eps)
    }));
    cases.push(case("relu", move || {
        let mut rng = mk_rng(6);
        let (m, n) = (dim(&mut rng, 2, 5), dim(&mut rng, 2, 5));
        let a = param_offzero(&mut rng, &[m, n], 0.05);
        grad_check(|| a.relu()?.mul(&a)?.sum_all(), std::slice::from_ref(&a), eps)
    }));
    cases.push(case("sigmoid", move || {
        let mut rng = mk_rng(7);
        let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
        let a = param(&mut rng, &[m, n]);
        grad_check(|| a.sigmoid()?.sum_all(), std::slice::from_ref(&a), eps)
    }));
    cases.push(case("tanh", move || {
        let mut rng = mk_rng(8);
        let n = dim(&mut rng, 2, 9);
        let a = param(&mut rng, &[n]);
        grad_check(|| a.tanh()?.mul(&a)?.sum_all(), std::slice::from_ref(&a), eps)
    }));
    cases.push(case("ln", move || {
        let mut rng = mk_rng(9);
        let n = dim(&mut rng, 2, 7);
        let vals = rand_vec(&mut rng, n, 0.2, 2.0);
        let a = Tensor::param(vec![n], vals, DType::F64).unwrap();
        grad_check(|| a.ln()?.sum_all(), std::slice::from_ref(&a), eps)
    }));
    cases.push(case("clamp", move || {
        let mut rng = mk_rng(10);
        let n = dim(&mut rng, 4, 12);
        let a = param(&mut rng, &[n]);
        grad_check(
            || a.clamp_range(-0.6, 0.6)?.mul(&a)?.sum_all(),
            std::slice::from_ref(&a),
            eps,
        )
    }));
    cases.push(case("clamp_coords", move || {
        let mut rng = mk_rng(21);
        let m = dim(&mut rng, 2, 6);
        let x = param(&mut rng, &[m, 2]);
        grad_check(
            || x.clamp_coords(0.7, 0.5)?.mul(&x)?.sum_all(),
            std::slice::from_ref(&x),
            eps,
        )
    }));
    cases.push(case("matmul", move || {
        let mut rng = mk_rng(11);
        let (m, k, n) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let a = param(&mut rng, &[m, k]);
        let b = param(&mut rng, &[k, n]);
        grad_check(|| a.matmul(&b)?.mul(&a.matmul(&b)?)?.sum_all(), &[a.clone(), b.clone()], eps)
    }));
    cases.push(case("conv2d", move || {
        let mut rng = mk_rng(12);
        let (b, h, w) = (dim(&mut rng, 1, 2), dim(&mut rng, 3, 6), dim(&mut rng, 3, 6));
        let (ci, co) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let x = param(&mut rng, &[b, h, w, ci]);
        let k = param(&mut rng, &[3, 3, ci, co]);
        let bias = param(&mut rng, &[co]);
        grad_check(
            || {
                let y = x.conv2d(&k, &bias, 1, Padding::Same)?;
                let z = x.conv2d(&k, &bias, 2, Padding::Valid)?;
                y.mul(&y)?.sum_all()?.add(&z.mul(&z)?.sum_all()?)
            },
            &[x.clone(), k.clone(), bias.clone()],
            eps,
        )
    }));
    cases.push(case("maxpool2", move || {
        let mut rng = mk_rng(13);
        let (h, w, c) = (2 * dim(&mut rng, 1, 3), 2 * dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let x = param_offzero(&mut rng, &[1, h, w, c], 0.02);
        grad_check(|| x.maxpool2()?.mul(&x.maxpool2()?)?.sum_all(), std::slice::from_ref(&x), eps)
    }));
    cases.push(case("bilinear_resize", move || {
        let mut rng = mk_rng(14);
        let (b, h, w, c) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 1, 3),
        );
        let (oh, ow) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let x = param(&mut rng, &[b, h, w, c]);
        grad_check(
            || {
                let y = x.bilinear_resize(oh, ow)?;
                y.mul(&y)?.sum_all()
            },
            std::slice::from_ref(&x),
            eps,
        )
    }));
    cases.push(case("l2_normalize", move || {
        let mut rng = mk_rng(15);
        let (m, c) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let x = param_offzero(&mut rng, &[m, c], 0.1);
        grad_check(|| x.l2_normalize(1e-8)?.mul(&x)?.sum_all(), std::slice::from_ref(&x), eps)
    }));
    cases.push(case("gather", move || {
        let mut rng = mk_rng(16);
        let (b, h, w, c) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 1, 3),
        );
        let m = dim(&mut rng, 1, 5);
        let src = param(&mut rng, &[b, h, w, c]);
        // Interior fractional coordinates keep the bilinear weights smooth
        // around the probe points.
        let mut cvals = Vec::new();
        for _ in 0..(b * m) {
            cvals.push(rng.gen_range(0..h - 1) as f64 + rng.gen_range(0.2..0.8));
            cvals.push(rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.2..0.8));
        }
        let coords = Tensor::param(vec![b, m, 2], cvals, DType::F64).unwrap();
        grad_check(
            || {
                let y = src.gather(&coords)?;
                y.mul(&y)?.sum_all()
            },
            &[src.clone(), coords.clone()],
            eps,
        )
    }));
    cases.push(case("permute", move || {
        let mut rng = mk_rng(17);
        let (a, b, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let x = param(&mut rng, &[a, b, c]);
        let mut axes = vec![0usize, 1, 2];
        axes.shuffle(&mut rng);
        grad_check(
            || {
                let y = x.permute(&axes)?;
                y.mul(&y)?.sum_all()
            },
            std::slice::from_ref(&x),
            eps,
        )
    }));
    cases.push(case("reshape", move || {
        let mut rng = mk_rng(18);
        let (m, n) = (dim(&mut rng, 1, 5), 2 * dim(&mut rng, 1, 3));
        let x = param(&mut rng, &[m, n]);
        grad_check(
            || {
                let y = x.reshape(&[m * n / 2, 2])?;
                y.mul(&y)?.sum_all()
            },
            std::slice::from_ref(&x),
            eps,
        )
    }));
    cases.push(case("concat", move || {
        let mut rng = mk_rng(19);
        let (m, n1, n2) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let a = param(&mut rng, &[m, n1]);
        let b = param(&mut rng, &[m, n2]);
        grad_check(
            || {
                let y = Tensor::concat(&[a.clone(), b.clone()], 1)?;
                y.mul(&y)?.sum_all()
            },
            &[a.clone(), b.clone()],
            eps,
        )
    }));
    cases.push(case("sum_axes", move || {
        let mut rng = mk_rng(20);
        let (a, b, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let x = param(&mut rng, &[a, b, c]);
        let axis = rng.gen_range(0..3usize);
        grad_check(
            || {
                let y = x.sum_axes(&[axis])?;
                y.mul(&y)?.sum_all()
            },
            std::slice::from_ref(&x),
            eps,
        )
    }));

    debug_assert_eq!(cases.len(), ALL_OP_KINDS.len());
    cases
}
