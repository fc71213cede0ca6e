//! Saliency evaluation metrics: MAE, max F-measure, max E-measure, and
//! S-measure.
//!
//! Predictions are `[0,1]` maps, ground truth is binary. The threshold
//! sweeps for the max metrics quantize predictions to the 256-level grid
//! (`floor(p * 255)`), i.e. a pixel counts as positive at level `i` iff its
//! 8-bit rendering reaches `i`; this matches evaluating the saliency map as
//! stored on disk and makes both computation routes agree bit-for-bit.
//!
//! Degenerate conventions (empty or full ground truth) follow the metrics'
//! published reference implementations:
//! - F with empty gt: 1 at a threshold iff no pixel is predicted positive.
//! - E with empty gt: `1 - mean(binarized pred)`; full gt: `mean(binarized)`.
//! - S with empty gt: `1 - mean(pred)`; full gt: `mean(pred)`.

use crate::error::{Error, Result};

pub const F_BETA_SQ: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
const LEVELS: usize = 256;

/// Per-image (or aggregated) metric values, all in `[0,1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricReport {
    pub s_measure: f64,
    pub e_max: f64,
    pub f_max: f64,
    pub mae: f64,
}

impl MetricReport {
    /// Dataset value: plain mean over per-image reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut acc = MetricReport::default();
        for r in reports {
            acc.s_measure += r.s_measure;
            acc.e_max += r.e_max;
            acc.f_max += r.f_max;
            acc.mae += r.mae;
        }
        MetricReport {
            s_measure: acc.s_measure / n,
            e_max: acc.e_max / n,
            f_max: acc.f_max / n,
            mae: acc.mae / n,
        }
    }
}

fn check_pair(op: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(
            op,
            format!("pred has {} values, gt has {}", pred.len(), gt.len()),
        ));
    }
    if pred.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid(format!("{op}: pred values must lie in [0,1]")));
    }
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("{op}: gt must be binary")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Quantized level of a prediction: positive at threshold `i` iff level >= i.
#[inline]
pub fn pred_level(p: f64) -> usize {
    ((p * 255.0).floor() as usize).min(255)
}

/// Cumulative (from the top level) positive-prediction counts split by gt.
fn level_counts(pred: &[f64], gt: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut fg = vec![0usize; LEVELS];
    let mut bg = vec![0usize; LEVELS];
    for (p, g) in pred.iter().zip(gt) {
        let b = pred_level(*p);
        if *g == 1.0 {
            fg[b] += 1;
        } else {
            bg[b] += 1;
        }
    }
    for i in (0..LEVELS - 1).rev() {
        fg[i] += fg[i + 1];
        bg[i] += bg[i + 1];
    }
    (fg, bg)
}

/// Maximum F-measure over the 256-threshold sweep, beta^2 = 0.3.
pub fn f_max(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("f_max", pred, gt)?;
    let (tp_at, fp_at) = level_counts(pred, gt);
    let total_fg = tp_at[0];
    let mut best = 0.0f64;
    for i in 0..LEVELS {
        let tp = tp_at[i] as f64;
        let pos = (tp_at[i] + fp_at[i]) as f64;
        let f = if total_fg == 0 {
            // Empty gt: perfect iff nothing is predicted positive.
            if pos == 0.0 {
                1.0
            } else {
                0.0
            }
        } else if pos == 0.0 || tp == 0.0 {
            0.0
        } else {
            let precision = tp / pos;
            let recall = tp / total_fg as f64;
            (1.0 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall)
        };
        if f > best {
            best = f;
        }
    }
    Ok(best)
}

/// Enhanced-alignment value for one (binary FM, binary GT) pixel class.
fn enhanced_align(phi_fm: f64, phi_gt: f64) -> f64 {
    let align = 2.0 * phi_fm * phi_gt / (phi_fm * phi_fm + phi_gt * phi_gt + f64::EPSILON);
    (align + 1.0) * (align + 1.0) / 4.0
}

/// Maximum E-measure over the 256-threshold sweep.
///
/// At each threshold the binarized map and gt are mean-centered; the
/// enhanced alignment takes only four distinct values (one per confusion
/// class), so the mean is a weighted sum over TP/FP/FN/TN counts.
pub fn e_max(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("e_max", pred, gt)?;
    let npix = pred.len() as f64;
    let (tp_at, fp_at) = level_counts(pred, gt);
    let total_fg = tp_at[0] as f64;
    let total_bg = fp_at[0] as f64;
    let mut best = 0.0f64;
    for i in 0..LEVELS {
        let tp = tp_at[i] as f64;
        let fp = fp_at[i] as f64;
        let mu_fm = (tp + fp) / npix;
        let e = if total_fg == 0.0 {
            1.0 - mu_fm
        } else if total_bg == 0.0 {
            mu_fm
        } else {
            let fnn = total_fg - tp;
            let tn = total_bg - fp;
            let mu_gt = total_fg / npix;
            let sum = tp * enhanced_align(1.0 - mu_fm, 1.0 - mu_gt)
                + fp * enhanced_align(1.0 - mu_fm, -mu_gt)
                + fnn * enhanced_align(-mu_fm, 1.0 - mu_gt)
                + tn * enhanced_align(-mu_fm, -mu_gt);
            sum / npix
        };
        if e > best {
            best = e;
        }
    }
    Ok(best)
}

fn mean_of(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Sample standard deviation (N-1 normalization; 0 for fewer than 2 values).
fn sample_std(vals: &[f64], mean: f64) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (vals.len() - 1) as f64).sqrt()
}

fn object_score(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let x = mean_of(vals);
    let sigma = sample_std(vals, x);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| **g == 1.0).map(|(p, _)| *p).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g == 0.0)
        .map(|(p, _)| 1.0 - *p)
        .collect();
    let mu = fg.len() as f64 / gt.len() as f64;
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

/// Ground-truth centroid in 1-based rounded coordinates (col, row), matching
/// the published region split.
fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = gt.iter().sum();
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1.0 {
                cx += (x + 1) as f64;
                cy += (y + 1) as f64;
            }
        }
    }
    (
        (cx / total).round() as usize,
        (cy / total).round() as usize,
    )
}

/// Structural similarity of one region under the region-measure definition.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean_of(pred);
    let y = mean_of(gt);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    sx /= denom;
    sy /= denom;
    sxy /= denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let area = (h * w) as f64;
    // Quadrants split at the centroid (1-based inclusive on the top-left).
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut score = 0.0;
    let mut weights = [0.0f64; 4];
    for (qi, (y0, y1, x0, x1)) in quads.iter().enumerate() {
        weights[qi] = ((y1 - y0) * (x1 - x0)) as f64 / area;
    }
    // Residual weight keeps the four weights summing to exactly one.
    weights[3] = 1.0 - weights[0] - weights[1] - weights[2];
    for (qi, (y0, y1, x0, x1)) in quads.iter().enumerate() {
        let mut pq = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut gq = Vec::with_capacity((y1 - y0) * (x1 - x0));
        for y in *y0..*y1 {
            for x in *x0..*x1 {
                pq.push(pred[y * w + x]);
                gq.push(gt[y * w + x]);
            }
        }
        score += weights[qi] * region_ssim(&pq, &gq);
    }
    score
}

/// Structure measure: `alpha * S_object + (1-alpha) * S_region`, alpha 0.5.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair("s_measure", pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::shape("s_measure", "dims do not match data length"));
    }
    let y = mean_of(gt);
    let q = if y == 0.0 {
        1.0 - mean_of(pred)
    } else if y == 1.0 {
        mean_of(pred)
    } else {
        let q = S_ALPHA * s_object(pred, gt) + (1.0 - S_ALPHA) * s_region(pred, gt, h, w);
        q.max(0.0)
    };
    Ok(q)
}

/// All four metrics of one prediction/gt pair.
pub fn evaluate_pair(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        s_measure: s_measure(pred, gt, h, w)?,
        e_max: e_max(pred, gt)?,
        f_max: f_max(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}
