//! Raw f64 compute kernels behind the tensor ops.
//!
//! Parallel loops split over disjoint output regions only, and every
//! reduction runs in a fixed order, so results are bit-identical for any
//! worker count.

use rayon::prelude::*;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output size and leading pad for one spatial dim.
pub(crate) fn conv_dim(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = input.div_ceil(stride);
        let pad_total = ((out - 1) * stride + k).saturating_sub(input);
        (out, pad_total / 2)
    } else {
        ((input - k) / stride + 1, 0)
    }
}

/// 3x3 stride-1 same-padding specialization: kernel-tap validity hoisted out
/// of the pixel loops, boundary columns split off the interior run.
#[allow(clippy::too_many_arguments)]
fn conv3x3_same_fwd(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * h * w * co];
    let x_img = h * w * ci;
    let o_img = h * w * co;
    out.par_chunks_mut(o_img)
        .zip(x.par_chunks(x_img))
        .for_each(|(outb, xb)| {
            for oy in 0..h {
                let orow = &mut outb[oy * w * co..(oy + 1) * w * co];
                for acc in orow.chunks_exact_mut(co) {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xb[iy as usize * w * ci..(iy as usize + 1) * w * ci];
                    for kx in 0..3usize {
                        let koff = (ky * 3 + kx) * ci * co;
                        let krows = &k[koff..koff + ci * co];
                        let ox_lo = 1usize.saturating_sub(kx);
                        let ox_hi = (w + 1 - kx).min(w);
                        for ox in ox_lo..ox_hi {
                            let xoff = (ox + kx - 1) * ci;
                            let acc = &mut orow[ox * co..ox * co + co];
                            for c_in in 0..ci {
                                let xv = xrow[xoff + c_in];
                                let krow = &krows[c_in * co..c_in * co + co];
                                for (a, kv) in acc.iter_mut().zip(krow) {
                                    *a += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    same: bool,
) -> Vec<f64> {
    if same && stride == 1 && kh == 3 && kw == 3 {
        return conv3x3_same_fwd(x, k, bias, b, h, w, ci, co);
    }
    let (oh, pt) = conv_dim(h, kh, stride, same);
    let (ow, pl) = conv_dim(w, kw, stride, same);
    let mut out = vec![0.0; b * oh * ow * co];
    let x_img = h * w * ci;
    let o_img = oh * ow * co;
    out.par_chunks_mut(o_img)
        .zip(x.par_chunks(x_img))
        .for_each(|(outb, xb)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let acc = &mut outb[(oy * ow + ox) * co..(oy * ow + ox) * co + co];
                    acc.copy_from_slice(bias);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xoff = (iy as usize * w + ix as usize) * ci;
                            let koff = (ky * kw + kx) * ci * co;
                            for c_in in 0..ci {
                                let xv = xb[xoff + c_in];
                                let krow = &k[koff + c_in * co..koff + c_in * co + co];
                                for (a, kv) in acc.iter_mut().zip(krow) {
                                    *a += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

fn transpose_kernel(k: &[f64], kh: usize, kw: usize, ci: usize, co: usize) -> Vec<f64> {
    // [kh, kw, ci, co] -> [kh, kw, co, ci] for contiguous ci inner loops.
    let mut kt = vec![0.0; k.len()];
    for ky in 0..kh {
        for kx in 0..kw {
            let base = (ky * kw + kx) * ci * co;
            for c_in in 0..ci {
                for c_out in 0..co {
                    kt[base + c_out * ci + c_in] = k[base + c_in * co + c_out];
                }
            }
        }
    }
    kt
}

fn conv3x3_same_bwd_x(
    gout: &[f64],
    kt: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * h * w * ci];
    let x_img = h * w * ci;
    let o_img = h * w * co;
    dx.par_chunks_mut(x_img)
        .zip(gout.par_chunks(o_img))
        .for_each(|(dxb, gb)| {
            for oy in 0..h {
                let grow_all = &gb[oy * w * co..(oy + 1) * w * co];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dxrow = &mut dxb[iy as usize * w * ci..(iy as usize + 1) * w * ci];
                    for kx in 0..3usize {
                        let koff = (ky * 3 + kx) * co * ci;
                        let ox_lo = 1usize.saturating_sub(kx);
                        let ox_hi = (w + 1 - kx).min(w);
                        for ox in ox_lo..ox_hi {
                            let xoff = (ox + kx - 1) * ci;
                            let grow = &grow_all[ox * co..ox * co + co];
                            let drow = &mut dxrow[xoff..xoff + ci];
                            for (c_out, g) in grow.iter().enumerate() {
                                if *g == 0.0 {
                                    continue;
                                }
                                let ktrow = &kt[koff + c_out * ci..koff + c_out * ci + ci];
                                for (d, kv) in drow.iter_mut().zip(ktrow) {
                                    *d += g * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd_x(
    gout: &[f64],
    k: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    same: bool,
) -> Vec<f64> {
    let kt = transpose_kernel(k, kh, kw, ci, co);
    if same && stride == 1 && kh == 3 && kw == 3 {
        return conv3x3_same_bwd_x(gout, &kt, b, h, w, ci, co);
    }
    let (oh, pt) = conv_dim(h, kh, stride, same);
    let (ow, pl) = conv_dim(w, kw, stride, same);
    let mut dx = vec![0.0; b * h * w * ci];
    let x_img = h * w * ci;
    let o_img = oh * ow * co;
    dx.par_chunks_mut(x_img)
        .zip(gout.par_chunks(o_img))
        .for_each(|(dxb, gb)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = &gb[(oy * ow + ox) * co..(oy * ow + ox) * co + co];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xoff = (iy as usize * w + ix as usize) * ci;
                            let koff = (ky * kw + kx) * ci * co;
                            let drow = &mut dxb[xoff..xoff + ci];
                            for (c_out, g) in grow.iter().enumerate() {
                                if *g == 0.0 {
                                    continue;
                                }
                                let ktrow = &kt[koff + c_out * ci..koff + c_out * ci + ci];
                                for (d, kv) in drow.iter_mut().zip(ktrow) {
                                    *d += g * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_k_one(
    xb: &[f64],
    gb: &[f64],
    dk: &mut [f64],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    same: bool,
) {
    if same && stride == 1 && kh == 3 && kw == 3 {
        for oy in 0..h {
            let grow_all = &gb[oy * w * co..(oy + 1) * w * co];
            for ky in 0..3usize {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &xb[iy as usize * w * ci..(iy as usize + 1) * w * ci];
                for kx in 0..3usize {
                    let koff = (ky * 3 + kx) * ci * co;
                    let ox_lo = 1usize.saturating_sub(kx);
                    let ox_hi = (w + 1 - kx).min(w);
                    for ox in ox_lo..ox_hi {
                        let xoff = (ox + kx - 1) * ci;
                        let grow = &grow_all[ox * co..ox * co + co];
                        for c_in in 0..ci {
                            let xv = xrow[xoff + c_in];
                            if xv == 0.0 {
                                continue;
                            }
                            let drow = &mut dk[koff + c_in * co..koff + c_in * co + co];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += xv * g;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    let (oh, pt) = conv_dim(h, kh, stride, same);
    let (ow, pl) = conv_dim(w, kw, stride, same);
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gb[(oy * ow + ox) * co..(oy * ow + ox) * co + co];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * ci;
                    let koff = (ky * kw + kx) * ci * co;
                    for c_in in 0..ci {
                        let xv = xb[xoff + c_in];
                        if xv == 0.0 {
                            continue;
                        }
                        let drow = &mut dk[koff + c_in * co..koff + c_in * co + co];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += xv * g;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd_k(
    x: &[f64],
    gout: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    same: bool,
) -> Vec<f64> {
    let (oh, _) = conv_dim(h, kh, stride, same);
    let (ow, _) = conv_dim(w, kw, stride, same);
    let x_img = h * w * ci;
    let o_img = oh * ow * co;
    let ksize = kh * kw * ci * co;
    // Per-batch-chunk partials merged in chunk order.
    let chunk = b.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let batches: Vec<usize> = (0..b).collect();
    let partials: Vec<Vec<f64>> = batches
        .par_chunks(chunk)
        .map(|bs| {
            let mut dk = vec![0.0; ksize];
            for &bi in bs {
                conv_bwd_k_one(
                    &x[bi * x_img..(bi + 1) * x_img],
                    &gout[bi * o_img..(bi + 1) * o_img],
                    &mut dk,
                    h,
                    w,
                    ci,
                    kh,
                    kw,
                    co,
                    stride,
                    same,
                );
            }
            dk
        })
        .collect();
    let mut dk = vec![0.0; ksize];
    for p in partials {
        for (d, v) in dk.iter_mut().zip(p) {
            *d += v;
        }
    }
    dk
}

pub(crate) fn conv2d_bwd_b(gout: &[f64], co: usize) -> Vec<f64> {
    let mut db = vec![0.0; co];
    for row in gout.chunks_exact(co) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

pub(crate) fn matmul_fwd(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

pub(crate) fn matmul_bwd_a(gout: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    da.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let grow = &gout[i * n..(i + 1) * n];
        for (kk, d) in row.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (g, bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            *d = acc;
        }
    });
    da
}

pub(crate) fn matmul_bwd_b(a: &[f64], gout: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let chunk = m.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let partials: Vec<Vec<f64>> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|rows| {
            let mut db = vec![0.0; k * n];
            for &i in rows {
                let arow = &a[i * k..(i + 1) * k];
                let grow = &gout[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let drow = &mut db[kk * n..(kk + 1) * n];
                    for (d, g) in drow.iter_mut().zip(grow) {
                        *d += av * g;
                    }
                }
            }
            db
        })
        .collect();
    let mut db = vec![0.0; k * n];
    for p in partials {
        for (d, v) in db.iter_mut().zip(p) {
            *d += v;
        }
    }
    db
}

/// Sample positions for bilinear resize: centers at `(i + 0.5) * in/out - 0.5`
/// clamped into `[0, in-1]`.
#[inline]
fn resize_pos(i: usize, scale: f64, input: usize) -> (usize, usize, f64) {
    let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, p - lo as f64)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_fwd(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let sh = h as f64 / oh as f64;
    let sw = w as f64 / ow as f64;
    let mut out = vec![0.0; b * oh * ow * c];
    out.par_chunks_mut(oh * ow * c)
        .zip(x.par_chunks(h * w * c))
        .for_each(|(ob, xb)| {
            for oy in 0..oh {
                let (y0, y1, fy) = resize_pos(oy, sh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = resize_pos(ox, sw, w);
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    let o = (oy * ow + ox) * c;
                    let p00 = (y0 * w + x0) * c;
                    let p01 = (y0 * w + x1) * c;
                    let p10 = (y1 * w + x0) * c;
                    let p11 = (y1 * w + x1) * c;
                    for ch in 0..c {
                        ob[o + ch] = w00 * xb[p00 + ch]
                            + w01 * xb[p01 + ch]
                            + w10 * xb[p10 + ch]
                            + w11 * xb[p11 + ch];
                    }
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_bwd(
    gout: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let sh = h as f64 / oh as f64;
    let sw = w as f64 / ow as f64;
    let mut dx = vec![0.0; b * h * w * c];
    dx.par_chunks_mut(h * w * c)
        .zip(gout.par_chunks(oh * ow * c))
        .for_each(|(dxb, gb)| {
            for oy in 0..oh {
                let (y0, y1, fy) = resize_pos(oy, sh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = resize_pos(ox, sw, w);
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    let o = (oy * ow + ox) * c;
                    let p00 = (y0 * w + x0) * c;
                    let p01 = (y0 * w + x1) * c;
                    let p10 = (y1 * w + x0) * c;
                    let p11 = (y1 * w + x1) * c;
                    for ch in 0..c {
                        let g = gb[o + ch];
                        dxb[p00 + ch] += w00 * g;
                        dxb[p01 + ch] += w01 * g;
                        dxb[p10 + ch] += w10 * g;
                        dxb[p11 + ch] += w11 * g;
                    }
                }
            }
        });
    dx
}

/// Bilinear point sampling of `src [B,H,W,C]` at `coords [B,M,2]` (row, col
/// order, clamped into range). Integer coordinates reduce to exact index
/// selection.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather_fwd(
    src: &[f64],
    coords: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    m: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * m * c];
    out.par_chunks_mut(m * c)
        .zip(src.par_chunks(h * w * c).zip(coords.par_chunks(m * 2)))
        .for_each(|(ob, (sb, cb))| {
            for i in 0..m {
                let y = cb[i * 2].clamp(0.0, (h - 1) as f64);
                let x = cb[i * 2 + 1].clamp(0.0, (w - 1) as f64);
                let y0 = y.floor() as usize;
                let x0 = x.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = y - y0 as f64;
                let fx = x - x0 as f64;
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    ob[i * c + ch] = w00 * sb[p00 + ch]
                        + w01 * sb[p01 + ch]
                        + w10 * sb[p10 + ch]
                        + w11 * sb[p11 + ch];
                }
            }
        });
    out
}

/// Backward of [`gather_fwd`]: scatter into `src` and chain through the
/// bilinear weights into the coordinates. Coordinates strictly outside the
/// valid range receive zero gradient (the clamp pins them).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather_bwd(
    src: &[f64],
    coords: &[f64],
    gout: &[f64],
    _b: usize,
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    corrupt: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dsrc = vec![0.0; src.len()];
    let mut dcoords = vec![0.0; coords.len()];
    dsrc.par_chunks_mut(h * w * c)
        .zip(dcoords.par_chunks_mut(m * 2))
        .zip(
            src.par_chunks(h * w * c)
                .zip(coords.par_chunks(m * 2).zip(gout.par_chunks(m * c))),
        )
        .for_each(|((dsb, dcb), (sb, (cb, gb)))| {
            for i in 0..m {
                let ry = cb[i * 2];
                let rx = cb[i * 2 + 1];
                let y = ry.clamp(0.0, (h - 1) as f64);
                let x = rx.clamp(0.0, (w - 1) as f64);
                let y0 = y.floor() as usize;
                let x0 = x.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = y - y0 as f64;
                let fx = x - x0 as f64;
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let mut dy = 0.0;
                let mut dx = 0.0;
                for ch in 0..c {
                    let g = gb[i * c + ch];
                    dsb[p00 + ch] += w00 * g;
                    dsb[p01 + ch] += w01 * g;
                    dsb[p10 + ch] += w10 * g;
                    dsb[p11 + ch] += w11 * g;
                    let v00 = sb[p00 + ch];
                    let v01 = sb[p01 + ch];
                    let v10 = sb[p10 + ch];
                    let v11 = sb[p11 + ch];
                    dy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    dx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                if ry >= 0.0 && ry <= (h - 1) as f64 {
                    dcb[i * 2] = dy;
                }
                if rx >= 0.0 && rx <= (w - 1) as f64 {
                    dcb[i * 2 + 1] = dx;
                }
            }
        });
    if corrupt {
        for v in dsrc.iter_mut() {
            *v *= 1.05;
        }
    }
    (dsrc, dcoords)
}

pub(crate) fn maxpool2_fwd(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; b * oh * ow * c];
    let mut argmax = vec![0u32; b * oh * ow * c];
    for bi in 0..b {
        let xb = &x[bi * h * w * c..];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c + ch;
                            // Strict > keeps the first maximum on ties.
                            if xb[idx] > best {
                                best = xb[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((bi * oh + oy) * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = (bi * h * w * c + best_idx) as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_bwd(gout: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &idx) in gout.iter().zip(argmax) {
        dx[idx as usize] += g;
    }
    dx
}

pub(crate) fn l2norm_fwd(x: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(c).zip(x.par_chunks(c)).for_each(|(o, v)| {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let d = norm.max(eps);
        for (oo, vv) in o.iter_mut().zip(v) {
            *oo = vv / d;
        }
    });
    out
}

pub(crate) fn l2norm_bwd(x: &[f64], gout: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(c)
        .zip(x.par_chunks(c).zip(gout.par_chunks(c)))
        .for_each(|(d, (v, g))| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm >= eps {
                let dot: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
                let n2 = norm * norm;
                for i in 0..c {
                    d[i] = (g[i] - v[i] * dot / n2) / norm;
                }
            } else {
                for i in 0..c {
                    d[i] = g[i] / eps;
                }
            }
        });
    dx
}

pub(crate) fn permute_fwd(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    // Trailing axes that stay in place move as one contiguous block.
    let mut keep = rank;
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes[..keep].iter().map(|&a| shape[a]).collect();
    let in_stride_for_out: Vec<usize> = axes[..keep].iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; x.len()];
    if keep == 0 {
        out.copy_from_slice(x);
        return out;
    }
    // Odometer over the leading output multi-index; in_off tracks the mapped
    // input offset incrementally.
    let mut idx = vec![0usize; keep];
    let mut in_off = 0usize;
    for chunk in out.chunks_exact_mut(block) {
        chunk.copy_from_slice(&x[in_off..in_off + block]);
        for d in (0..keep).rev() {
            idx[d] += 1;
            in_off += in_stride_for_out[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= in_stride_for_out[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn concat_fwd(parts: &[(&[f64], usize)], outer: usize, inner: usize) -> Vec<f64> {
    let total_axis: usize = parts.iter().map(|(_, a)| a).sum();
    let mut out = vec![0.0; outer * total_axis * inner];
    let mut axis_off = 0usize;
    for (data, axis_len) in parts {
        for o in 0..outer {
            let dst = (o * total_axis + axis_off) * inner;
            let src = o * axis_len * inner;
            out[dst..dst + axis_len * inner].copy_from_slice(&data[src..src + axis_len * inner]);
        }
        axis_off += axis_len;
    }
    out
}

pub(crate) fn concat_bwd(
    gout: &[f64],
    part_axis_lens: &[usize],
    outer: usize,
    inner: usize,
) -> Vec<Vec<f64>> {
    let total_axis: usize = part_axis_lens.iter().sum();
    let mut grads = Vec::with_capacity(part_axis_lens.len());
    let mut axis_off = 0usize;
    for &axis_len in part_axis_lens {
        let mut g = vec![0.0; outer * axis_len * inner];
        for o in 0..outer {
            let src = (o * total_axis + axis_off) * inner;
            let dst = o * axis_len * inner;
            g[dst..dst + axis_len * inner].copy_from_slice(&gout[src..src + axis_len * inner]);
        }
        grads.push(g);
        axis_off += axis_len;
    }
    grads
}

/// Reduce the listed axes by summation. Returns (out_data, out_shape).
pub(crate) fn sum_axes_fwd(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let out_shape: Vec<usize> = (0..rank).filter(|d| !reduced[*d]).map(|d| shape[d]).collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let out_strides = strides(&out_shape);
    // For each input axis, the stride it contributes to the output index.
    let mut contrib = vec![0usize; rank];
    let mut oi = 0usize;
    for d in 0..rank {
        if !reduced[d] {
            contrib[d] = out_strides[oi];
            oi += 1;
        }
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    for v in x {
        out[out_off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            out_off += contrib[d];
            if idx[d] < shape[d] {
                break;
            }
            out_off -= contrib[d] * shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn sum_axes_bwd(gout: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let out_shape: Vec<usize> = (0..rank).filter(|d| !reduced[*d]).map(|d| shape[d]).collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let out_strides = strides(&out_shape);
    let mut contrib = vec![0usize; rank];
    let mut oi = 0usize;
    for d in 0..rank {
        if !reduced[d] {
            contrib[d] = out_strides[oi];
            oi += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut dx = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    for d in dx.iter_mut() {
        *d = gout[out_off];
        for dd in (0..rank).rev() {
            idx[dd] += 1;
            out_off += contrib[dd];
            if idx[dd] < shape[dd] {
                break;
            }
            out_off -= contrib[dd] * shape[dd];
            idx[dd] = 0;
        }
    }
    dx
}
