//! Supervision losses.
//!
//! Segmentation is supervised by mean binary cross-entropy plus a soft IoU
//! loss. Correspondence estimation is self-supervised by an object-aware
//! cycle consistency term: each image, masked to its co-salient pixels, is
//! warped to a partner frame and back through the estimated correspondence
//! fields, and the round trip must reproduce the masked image under SSIM.
//! Masking happens before the warp as well as before the SSIM, so pixels
//! outside the mask can never influence the loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::correspond::CorrespondenceField;
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

/// Clamp applied to probabilities before the log.
pub const BCE_EPS: f64 = 1e-7;
/// Guard on the soft-IoU denominator.
pub const IOU_EPS: f64 = 1e-12;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bce: f64,
    pub iou: f64,
    pub occ: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, iou: 1.0, occ: 0.1 }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub bce: f64,
    pub iou: f64,
    /// Per-stage cycle-consistency terms, keyed by stage.
    pub occ_stages: BTreeMap<usize, f64>,
    pub occ: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn csv_header(stages: &[usize]) -> String {
        let occ_cols: Vec<String> = stages.iter().map(|s| format!("occ{s}")).collect();
        format!("step,bce,iou,{},occ,total", occ_cols.join(","))
    }

    pub fn csv_line(&self, step: usize) -> String {
        let occ_cols: Vec<String> = self
            .occ_stages
            .values()
            .map(|v| format!("{v:.6}"))
            .collect();
        format!(
            "{step},{:.6},{:.6},{},{:.6},{:.6}",
            self.bce,
            self.iou,
            occ_cols.join(","),
            self.occ,
            self.total
        )
    }
}

fn check_prob_gt(prob: &Tensor, gt: &Tensor) -> Result<()> {
    if prob.shape() != gt.shape() || prob.shape().len() != 4 {
        return Err(Error::shape(
            "bce_iou",
            format!("prob {:?} and gt {:?} must match as [N,H,W,1]", prob.shape(), gt.shape()),
        ));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("ground truth mask must be binary {0,1}"));
    }
    Ok(())
}

/// Mean binary cross-entropy and soft IoU loss (both differentiable
/// scalars). Probabilities are clamped to `[BCE_EPS, 1-BCE_EPS]` before the
/// log; IoU is `1 - intersection/union` per image, averaged over the group.
pub fn bce_iou(prob: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    check_prob_gt(prob, gt)?;
    let p = prob.clamp_range(BCE_EPS, 1.0 - BCE_EPS)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_g = gt.affine(-1.0, 1.0)?;
    let ll = gt.mul(&p.ln()?)?.add(&one_minus_g.mul(&one_minus_p.ln()?)?)?;
    let bce = ll.mean_all()?.neg()?;

    let pg = prob.mul(gt)?;
    let inter = pg.sum_axes(&[1, 2, 3])?;
    let union = prob.add(gt)?.sub(&pg)?.sum_axes(&[1, 2, 3])?;
    let frac = inter.div(&union.add_scalar(IOU_EPS)?)?;
    let iou = frac.affine(-1.0, 1.0)?.mean_all()?;
    Ok((bce, iou))
}

/// Largest odd window that fits both image dims.
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    let cap = window.min(h).min(w);
    if cap.is_multiple_of(2) {
        (cap - 1).max(1)
    } else {
        cap.max(1)
    }
}

/// Uniform-window SSIM map statistics on a batch `[B,H,W,C]`, reduced to a
/// per-element score `[B]`.
fn ssim_batch(x: &Tensor, y: &Tensor, window: usize, c1: f64, c2: f64) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s != y.shape() || s.len() != 4 {
        return Err(Error::shape(
            "ssim",
            format!("inputs {:?} and {:?} must match as [B,H,W,C]", x.shape(), y.shape()),
        ));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    if window.is_multiple_of(2) || window > h || window > w {
        return Err(Error::invalid(format!(
            "ssim window {window} must be odd and fit the {h}x{w} image"
        )));
    }
    // Channel-preserving mean filter.
    let inv = 1.0 / (window * window) as f64;
    let mut kv = vec![0.0; window * window * c * c];
    for p in 0..window * window {
        for ch in 0..c {
            kv[(p * c + ch) * c + ch] = inv;
        }
    }
    let kernel = Tensor::from_vec_dtype(vec![window, window, c, c], kv, x.dtype())?;
    let zero_bias = Tensor::zeros(vec![c], x.dtype());
    let filt = |t: &Tensor| t.conv2d(&kernel, &zero_bias, 1, Padding::Valid);

    let mu_x = filt(x)?;
    let mu_y = filt(y)?;
    let mu_xx = mu_x.mul(&mu_x)?;
    let mu_yy = mu_y.mul(&mu_y)?;
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = filt(&x.mul(x)?)?.sub(&mu_xx)?;
    let var_y = filt(&y.mul(y)?)?.sub(&mu_yy)?;
    let cov = filt(&x.mul(y)?)?.sub(&mu_xy)?;

    let num = mu_xy.scale(2.0)?.add_scalar(c1)?.mul(&cov.scale(2.0)?.add_scalar(c2)?)?;
    let den = mu_xx.add(&mu_yy)?.add_scalar(c1)?.mul(&var_x.add(&var_y)?.add_scalar(c2)?)?;
    num.div(&den)?.mean_axes(&[1, 2, 3])
}

/// Mean structural similarity of two `[H,W,C]` images in `[0,1]` under
/// uniform window statistics; result lies in `[-1, 1]`.
pub fn ssim(x: &Tensor, y: &Tensor, window: usize, c1: f64, c2: f64) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("ssim", format!("expected [H,W,C], got {s:?}")));
    }
    let xb = x.reshape(&[1, s[0], s[1], s[2]])?;
    let yb = y.reshape(&[1, s[0], s[1], s[2]])?;
    ssim_batch(&xb, &yb, window, c1, c2)?.reshape(&[1])
}

/// Warp `src [H,W,C]` through the cycle i -> j -> i.
///
/// `field_ij [H,W,2]` holds, per source pixel, its correspondence in frame
/// j; `field_ji` the reverse. The composed mapping evaluates `field_ji`
/// bilinearly at `field_ij(p)` and samples `src` there, so mutually
/// consistent fields reproduce `src` exactly. Gradients flow into both
/// fields through the sampling weights.
pub fn warp_cycle(src: &Tensor, field_ij: &Tensor, field_ji: &Tensor) -> Result<Tensor> {
    let s = src.shape().to_vec();
    let fs = field_ij.shape().to_vec();
    if s.len() != 3 || fs.len() != 3 || fs[2] != 2 || fs[..2] != s[..2] || field_ji.shape() != fs {
        return Err(Error::shape(
            "warp_cycle",
            format!("src {s:?}, field_ij {fs:?}, field_ji {:?} disagree", field_ji.shape()),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let coords = field_ij.reshape(&[1, h * w, 2])?;
    let ji = field_ji.reshape(&[1, h, w, 2])?;
    let back = ji.gather(&coords)?; // [1, H*W, 2]
    let out = src.reshape(&[1, h, w, c])?.gather(&back)?;
    out.reshape(&[h, w, c])
}

/// Per-stage inputs of the cycle consistency loss: the stage-resized images
/// and masks (constants) plus the stage's correspondence field.
pub struct StageWarpInputs {
    /// `[N, H_s, W_s, 3]` images in `[0,1]`.
    pub images: Tensor,
    /// `[N, H_s, W_s, 1]` binary masks.
    pub masks: Tensor,
    pub field: CorrespondenceField,
}

/// Object-aware cycle consistency over all image pairs (including i = j) of
/// every stage, normalized by N^2 per stage and summed over stages.
///
/// `object_aware = false` replaces the masks with all-ones (the full-pixel
/// ablation). Returns the differentiable total plus the per-stage scalar
/// breakdown.
pub fn occ_loss(
    stages: &[StageWarpInputs],
    window: usize,
    object_aware: bool,
) -> Result<(Tensor, BTreeMap<usize, f64>)> {
    if stages.is_empty() {
        return Err(Error::invalid("occ_loss needs at least one stage"));
    }
    let dtype = stages[0].images.dtype();
    let mut total: Option<Tensor> = None;
    let mut breakdown = BTreeMap::new();
    for stage in stages {
        let s = stage.images.shape().to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(
                "occ_loss",
                format!("stage images must be [N,H,W,3], got {s:?}"),
            ));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        if stage.masks.shape() != [n, h, w, 1] {
            return Err(Error::shape(
                "occ_loss",
                format!("stage masks {:?} do not match images {s:?}", stage.masks.shape()),
            ));
        }
        let refined = &stage.field.refined;
        if refined.shape() != [n, h, w, n, 2] {
            return Err(Error::shape(
                "occ_loss",
                format!("field {:?} does not match stage [N,H,W,N,2]", refined.shape()),
            ));
        }

        // Masked source images, replicated so batch (i,j) holds image i.
        let imgs = stage.images.data();
        let msks = stage.masks.data();
        let img_len = h * w * 3;
        let mut masked = vec![0.0f64; n * img_len];
        for i in 0..n * h * w {
            let m = if object_aware { msks[i] } else { 1.0 };
            for ch in 0..3 {
                masked[i * 3 + ch] = imgs[i * 3 + ch] * m;
            }
        }
        let mut masked_rep = vec![0.0f64; n * n * img_len];
        let mut mask3_rep = vec![0.0f64; n * n * img_len];
        for i in 0..n {
            for j in 0..n {
                let dst = (i * n + j) * img_len;
                masked_rep[dst..dst + img_len]
                    .copy_from_slice(&masked[i * img_len..(i + 1) * img_len]);
                for p in 0..h * w {
                    let m = if object_aware { msks[i * h * w + p] } else { 1.0 };
                    for ch in 0..3 {
                        mask3_rep[dst + p * 3 + ch] = m;
                    }
                }
            }
        }
        drop(imgs);
        drop(msks);
        let src_rep = Tensor::from_vec_dtype(vec![n * n, h, w, 3], masked_rep, dtype)?;
        let mask_rep = Tensor::from_vec_dtype(vec![n * n, h, w, 3], mask3_rep, dtype)?;

        // Batch (i,j): forward field i->j and reverse field j->i.
        let fwd = refined
            .permute(&[0, 3, 1, 2, 4])?
            .reshape(&[n * n, h * w, 2])?;
        let rev = refined
            .permute(&[3, 0, 1, 2, 4])?
            .reshape(&[n * n, h, w, 2])?;
        let back = rev.gather(&fwd)?; // [N^2, H*W, 2] coordinates in frame i
        let cycled = src_rep.gather(&back)?.reshape(&[n * n, h, w, 3])?;
        let cycled_masked = cycled.mul(&mask_rep)?;

        let win = effective_window(window, h, w);
        let scores = ssim_batch(&src_rep, &cycled_masked, win, SSIM_C1, SSIM_C2)?;
        // (1 - ssim)/2 averaged over the N^2 pairs.
        let stage_loss = scores.affine(-0.5, 0.5)?.mean_all()?;
        breakdown.insert(stage.field.stage, stage_loss.scalar()?);
        total = Some(match total {
            Some(t) => t.add(&stage_loss)?,
            None => stage_loss,
        });
    }
    Ok((total.unwrap(), breakdown))
}
