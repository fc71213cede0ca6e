//! Correspondence estimation and association condensation.
//!
//! For every source pixel and target image, the full set of target
//! associations is replaced by a K x K window around the pixel's estimated
//! semantic correspondence. The initial correspondence is the
//! max-summed-similarity pixel; a linear head then predicts per-window
//! offsets (deformable-sampling style: the learned offsets perturb the fixed
//! window grid, so a zero head reproduces the heuristic window exactly).
//! Gradients flow through the fractional gather into the offset head, never
//! into the argmax indices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::{aggregate, AggConfig, AggParams, AssociationFeature};
use crate::error::{Error, Result};
use crate::hyper::{sum_layers_raw, CondensedHyperassociation, Hyperassociation};
use crate::nn::LinearParams;
use crate::tensor::Tensor;
use crate::threads;

/// Condensation flavor: the heuristic window only, or the full two-pass flow
/// with learned offsets.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondenseMode {
    Sac,
    Cac,
}

/// Optional bound on learned offsets.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetBound {
    /// Unbounded; coordinates clamp at gather time.
    #[default]
    None,
    /// `tanh(raw) * K` keeps displacements within one window radius.
    Tanh,
}

/// Learned offset grid of one stage: `[N, H, W, Nt, K, K, 2]` displacements
/// in target pixel units.
#[derive(Clone)]
pub struct OffsetGrid {
    pub delta: Tensor,
    pub k: usize,
}

impl OffsetGrid {
    pub fn center_index(&self) -> usize {
        (self.k - 1) / 2
    }
}

/// Estimated correspondences of one stage.
#[derive(Clone)]
pub struct CorrespondenceField {
    /// `[N, H, W, Nt, 2]` integer heuristic coordinates (constant).
    pub init: Tensor,
    /// `[N, H, W, Nt, 2]` refined float coordinates, clamped in range.
    pub refined: Tensor,
    /// `[N, H, W, Nt, K, K, 2]` window coordinates, clamped in range;
    /// the center entry equals `refined` exactly.
    pub neighbors: Tensor,
    pub stage: usize,
}

impl CorrespondenceField {
    pub fn window(&self) -> usize {
        self.neighbors.shape()[4]
    }
}

/// Per source pixel and target image, the target pixel with the largest
/// layer-summed similarity; ties break toward the smallest row-major index.
///
/// Purely index-valued: the result is a constant `[N, H, W, Nt, 2]` tensor.
pub fn initial_correspondence(assoc: &Hyperassociation) -> Result<Tensor> {
    let n = assoc.group_size();
    let (h, w) = assoc.spatial();
    let m = n * h * w;
    let sums = sum_layers_raw(assoc);
    threads::init_pool();
    let mut coords = vec![0.0f64; m * n * 2];
    coords
        .par_chunks_mut(n * 2)
        .enumerate()
        .for_each(|(p, row)| {
            let base = p * m;
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut best_q = 0usize;
                for q in 0..h * w {
                    let v = sums[base + j * h * w + q];
                    if v > best {
                        best = v;
                        best_q = q;
                    }
                }
                row[j * 2] = (best_q / w) as f64;
                row[j * 2 + 1] = (best_q % w) as f64;
            }
        });
    Tensor::from_vec_dtype(vec![n, h, w, n, 2], coords, assoc.values.dtype())
}

/// The fixed K x K grid centered on each initial coordinate, clamped into
/// bounds. Constant.
pub fn fixed_window(init: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    if k.is_multiple_of(2) {
        return Err(Error::invalid("window size K must be odd"));
    }
    let s = init.shape();
    if s.len() != 5 || s[4] != 2 {
        return Err(Error::shape(
            "fixed_window",
            format!("expected [N,H,W,Nt,2], got {s:?}"),
        ));
    }
    let kc = (k - 1) as f64 / 2.0;
    let data = init.data();
    let mut out = vec![0.0f64; data.len() / 2 * k * k * 2];
    for (pi, pair) in data.chunks_exact(2).enumerate() {
        let (cy, cx) = (pair[0], pair[1]);
        let base = pi * k * k * 2;
        for ky in 0..k {
            for kx in 0..k {
                let o = base + (ky * k + kx) * 2;
                out[o] = (cy + ky as f64 - kc).clamp(0.0, (h - 1) as f64);
                out[o + 1] = (cx + kx as f64 - kc).clamp(0.0, (w - 1) as f64);
            }
        }
    }
    let mut shape = s[..4].to_vec();
    shape.extend([k, k, 2]);
    drop(data);
    Tensor::from_vec_dtype(shape, out, init.dtype())
}

/// Predict the offset grid from the per-target association features
/// `[N, H, W, Nt, C]` with a shared linear head (`C -> K*K*2`).
pub fn predict_offsets(
    per_target: &Tensor,
    head: &LinearParams,
    k: usize,
    bound: OffsetBound,
) -> Result<OffsetGrid> {
    let s = per_target.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(
            "predict_offsets",
            format!("expected [N,H,W,Nt,C], got {s:?}"),
        ));
    }
    if head.weight.shape()[1] != k * k * 2 {
        return Err(Error::shape(
            "predict_offsets",
            format!(
                "head emits {} values, window K={k} needs {}",
                head.weight.shape()[1],
                k * k * 2
            ),
        ));
    }
    let raw = head.apply(per_target)?;
    let raw = match bound {
        OffsetBound::None => raw,
        OffsetBound::Tanh => raw.tanh()?.scale(k as f64)?,
    };
    let delta = raw.reshape(&[s[0], s[1], s[2], s[3], k, k, 2])?;
    Ok(OffsetGrid { delta, k })
}

/// Mask `[K,K,2]` that is 1 at the center pair and 0 elsewhere.
fn center_mask(k: usize, dtype: crate::tensor::DType) -> Tensor {
    let kc = (k - 1) / 2;
    let mut m = vec![0.0; k * k * 2];
    m[(kc * k + kc) * 2] = 1.0;
    m[(kc * k + kc) * 2 + 1] = 1.0;
    Tensor::from_vec_dtype(vec![k, k, 2], m, dtype).unwrap()
}

/// Fixed window grid `[K,K,2]` of displacements from the center; zero at the
/// center.
fn base_grid(k: usize, dtype: crate::tensor::DType) -> Tensor {
    let kc = (k - 1) as f64 / 2.0;
    let mut g = vec![0.0; k * k * 2];
    for ky in 0..k {
        for kx in 0..k {
            g[(ky * k + kx) * 2] = ky as f64 - kc;
            g[(ky * k + kx) * 2 + 1] = kx as f64 - kc;
        }
    }
    Tensor::from_vec_dtype(vec![k, k, 2], g, dtype).unwrap()
}

/// Compose initial coordinates with the learned offsets.
///
/// The refined correspondence adds the center offset to the heuristic pixel;
/// every other window entry sits at the refined center plus its fixed grid
/// displacement plus its own learned offset. All coordinates clamp into
/// bounds, and the window center stays exactly equal to the refined
/// coordinate.
pub fn build_neighbors(
    init: &Tensor,
    offsets: &OffsetGrid,
    stage: usize,
    h: usize,
    w: usize,
) -> Result<CorrespondenceField> {
    let s = init.shape().to_vec();
    let ds = offsets.delta.shape().to_vec();
    if s.len() != 5 || ds.len() != 7 || ds[..4] != s[..4] {
        return Err(Error::shape(
            "build_neighbors",
            format!("init {s:?} and delta {ds:?} disagree"),
        ));
    }
    let k = offsets.k;
    let dtype = init.dtype();
    let max_row = (h - 1) as f64;
    let max_col = (w - 1) as f64;

    let center = offsets.delta.mul(&center_mask(k, dtype))?.sum_axes(&[4, 5])?;
    let refined = init.add(&center)?.clamp_coords(max_row, max_col)?;

    // Repeat the refined center across the window, then displace.
    let flat = refined.reshape(&[s[0], s[1], s[2], s[3], 1, 2])?;
    let repeated = Tensor::concat(&vec![flat; k * k], 4)?
        .reshape(&[s[0], s[1], s[2], s[3], k, k, 2])?;
    let keep = center_mask(k, dtype).affine(-1.0, 1.0)?;
    let displacement = offsets.delta.mul(&keep)?.add(&base_grid(k, dtype))?;
    let neighbors = repeated.add(&displacement)?.clamp_coords(max_row, max_col)?;

    Ok(CorrespondenceField { init: init.clone(), refined, neighbors, stage })
}

/// Index-select the hyperassociation at the window coordinates:
/// `[N,H,W,Nt,H,W,L]` sampled at `[N,H,W,Nt,K,K,2]` gives
/// `[N,H,W,Nt,K,K,L]`.
pub fn condense(
    assoc: &Hyperassociation,
    neighbors: &Tensor,
) -> Result<CondensedHyperassociation> {
    let n = assoc.group_size();
    let (h, w) = assoc.spatial();
    let l = assoc.layers();
    let ns = neighbors.shape().to_vec();
    if ns.len() != 7 || ns[..4] != [n, h, w, n] || ns[6] != 2 {
        return Err(Error::shape(
            "condense",
            format!("neighbor coords {ns:?} do not match association dims"),
        ));
    }
    let k = ns[4];
    let b = n * h * w * n;
    let src = assoc.values.reshape(&[b, h, w, l])?;
    let coords = neighbors.reshape(&[b, k * k, 2])?;
    let values = src.gather(&coords)?.reshape(&[n, h, w, n, k, k, l])?;
    Ok(CondensedHyperassociation { values, coords: neighbors.clone(), stage: assoc.stage })
}

/// The full condensation flow of one stage.
///
/// Both modes first condense with the heuristic window and aggregate once.
/// CAC then predicts offsets from those initial features, rebuilds the
/// window, condenses again, and aggregates a second time (with `second_agg`
/// when the two passes use separate weights). Returns the final condensed
/// associations, the final aggregated features, and the correspondence
/// field.
#[allow(clippy::too_many_arguments)]
pub fn cac_pass(
    assoc: &Hyperassociation,
    cfg: &AggConfig,
    agg: &AggParams,
    second_agg: Option<&AggParams>,
    offset_head: &LinearParams,
    k: usize,
    mode: CondenseMode,
    bound: OffsetBound,
) -> Result<(CondensedHyperassociation, AssociationFeature, CorrespondenceField)> {
    let (h, w) = assoc.spatial();
    if k.is_multiple_of(2) || k > h.min(w) {
        return Err(Error::invalid(format!(
            "window K={k} must be odd and fit the {h}x{w} stage"
        )));
    }
    let init = initial_correspondence(assoc)?;
    let window = fixed_window(&init, k, h, w)?;
    let condensed = condense(assoc, &window)?;
    let feat = aggregate(&condensed.values, cfg, agg)?;
    match mode {
        CondenseMode::Sac => {
            let field = CorrespondenceField {
                refined: init.clone(),
                neighbors: window,
                init,
                stage: assoc.stage,
            };
            Ok((condensed, feat, field))
        }
        CondenseMode::Cac => {
            let offsets = predict_offsets(&feat.per_target, offset_head, k, bound)?;
            let field = build_neighbors(&init, &offsets, assoc.stage, h, w)?;
            let refined_condensed = condense(assoc, &field.neighbors)?;
            let refined_feat =
                aggregate(&refined_condensed.values, cfg, second_agg.unwrap_or(agg))?;
            Ok((refined_condensed, refined_feat, field))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggLayerSpec;
    use crate::tensor::DType;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn assoc_from(n: usize, h: usize, w: usize, l: usize, seed: u64) -> Hyperassociation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = n * h * w;
        let data: Vec<f64> = (0..m * m * l).map(|_| rng.gen_range(0.0..1.0)).collect();
        Hyperassociation {
            values: Tensor::from_vec(vec![n, h, w, n, h, w, l], data).unwrap(),
            stage: 4,
        }
    }

    #[test]
    fn initial_correspondence_finds_unique_max() {
        let (n, h, w) = (1, 4, 5);
        let mut data = vec![0.0; h * w * h * w];
        // Source pixel (0,0): maximum at target (2,3).
        data[2 * w + 3] = 0.9;
        let assoc = Hyperassociation {
            values: Tensor::from_vec(vec![n, h, w, n, h, w, 1], data).unwrap(),
            stage: 3,
        };
        let init = initial_correspondence(&assoc).unwrap();
        let d = init.to_vec();
        assert_eq!((d[0], d[1]), (2.0, 3.0));
    }

    #[test]
    fn initial_correspondence_ties_break_row_major() {
        let assoc = Hyperassociation {
            values: Tensor::full(vec![2, 2, 2, 2, 2, 2, 2], 0.5, DType::F64),
            stage: 3,
        };
        let init = initial_correspondence(&assoc).unwrap();
        assert!(init.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_correspondence_matches_exhaustive_scan() {
        for seed in 0..50u64 {
            let (n, h, w, l) = (2, 3, 4, 2);
            let assoc = assoc_from(n, h, w, l, seed);
            let init = initial_correspondence(&assoc).unwrap();
            let got = init.to_vec();
            let data = assoc.values.to_vec();
            let m = n * h * w;
            for p in 0..m {
                for j in 0..n {
                    let mut best = f64::NEG_INFINITY;
                    let mut want = (0usize, 0usize);
                    for ty in 0..h {
                        for tx in 0..w {
                            let q = j * h * w + ty * w + tx;
                            let s: f64 = (0..l).map(|li| data[(p * m + q) * l + li]).sum();
                            if s > best {
                                best = s;
                                want = (ty, tx);
                            }
                        }
                    }
                    let off = (p * n + j) * 2;
                    assert_eq!((got[off] as usize, got[off + 1] as usize), want);
                }
            }
        }
    }

    #[test]
    fn fixed_window_grid_and_clamping() {
        let init = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![4.0, 4.0]).unwrap();
        let win = fixed_window(&init, 3, 8, 8).unwrap();
        let d = win.to_vec();
        let mut idx = 0;
        for ky in 0..3 {
            for kx in 0..3 {
                assert_eq!(d[idx], (3 + ky) as f64);
                assert_eq!(d[idx + 1], (3 + kx) as f64);
                idx += 2;
            }
        }

        let origin = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let win = fixed_window(&origin, 3, 8, 8).unwrap();
        let d = win.to_vec();
        // First row of the window: (-1,-1), (-1,0), (-1,1) all clamp row 0.
        assert_eq!(&d[..6], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let single = fixed_window(&origin, 1, 8, 8).unwrap();
        assert_eq!(single.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_head_predicts_zero_offsets() {
        let per_target =
            Tensor::from_vec(vec![1, 2, 2, 1, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let head = LinearParams::zeros(3, 3 * 3 * 2, DType::F64).unwrap();
        let grid = predict_offsets(&per_target, &head, 3, OffsetBound::None).unwrap();
        assert!(grid.delta.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_feature_slices_give_identical_grids() {
        let slice = [0.3, -0.6];
        let per_target = Tensor::from_vec(vec![1, 1, 2, 1, 2], [slice, slice].concat()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = LinearParams::init(&mut rng, 2, 2, DType::F64).unwrap();
        let grid = predict_offsets(&per_target, &head, 1, OffsetBound::None).unwrap();
        let d = grid.delta.to_vec();
        assert_eq!(&d[..2], &d[2..]);
    }

    #[test]
    fn hand_affine_offsets() {
        // C=2, K=1: delta = x @ W + b with hand-set weights.
        let per_target = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![2.0, -1.0]).unwrap();
        let head = LinearParams {
            weight: Tensor::param(vec![2, 2], vec![1.0, 0.5, -1.0, 2.0], DType::F64).unwrap(),
            bias: Tensor::param(vec![2], vec![0.25, -0.25], DType::F64).unwrap(),
        };
        let grid = predict_offsets(&per_target, &head, 1, OffsetBound::None).unwrap();
        // [2,-1] @ [[1,0.5],[-1,2]] + [0.25,-0.25] = (3.25, -1.25)
        assert_eq!(grid.delta.to_vec(), vec![3.25, -1.25]);
    }

    #[test]
    fn zero_offsets_reproduce_fixed_window() {
        let init = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![3.0, 2.0]).unwrap();
        let delta = Tensor::zeros(vec![1, 1, 1, 1, 3, 3, 2], DType::F64);
        let field = build_neighbors(&init, &OffsetGrid { delta, k: 3 }, 4, 8, 8).unwrap();
        assert_eq!(field.refined.to_vec(), vec![3.0, 2.0]);
        let want = fixed_window(&init, 3, 8, 8).unwrap();
        assert_eq!(field.neighbors.to_vec(), want.to_vec());
    }

    #[test]
    fn center_offset_shifts_all_neighbors() {
        let init = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![3.0, 3.0]).unwrap();
        let mut dv = vec![0.0; 3 * 3 * 2];
        dv[(3 + 1) * 2] = 0.5;
        dv[(3 + 1) * 2 + 1] = -0.5;
        let delta = Tensor::from_vec(vec![1, 1, 1, 1, 3, 3, 2], dv).unwrap();
        let shifted = build_neighbors(&init, &OffsetGrid { delta, k: 3 }, 4, 8, 8).unwrap();
        let zero = build_neighbors(
            &init,
            &OffsetGrid { delta: Tensor::zeros(vec![1, 1, 1, 1, 3, 3, 2], DType::F64), k: 3 },
            4,
            8,
            8,
        )
        .unwrap();
        for (s, z) in shifted
            .neighbors
            .to_vec()
            .chunks_exact(2)
            .zip(zero.neighbors.to_vec().chunks_exact(2))
        {
            assert!((s[0] - (z[0] + 0.5)).abs() < 1e-12);
            assert!((s[1] - (z[1] - 0.5)).abs() < 1e-12);
        }
        assert_eq!(shifted.refined.to_vec(), vec![3.5, 2.5]);
    }

    #[test]
    fn build_neighbors_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, h, w, nt, k) = (2, 2, 2, 2, 3);
        let kc = (k - 1) / 2;
        let init_vals: Vec<f64> = (0..n * h * w * nt * 2)
            .map(|i| {
                if i % 2 == 0 {
                    rng.gen_range(0..h) as f64
                } else {
                    rng.gen_range(0..w) as f64
                }
            })
            .collect();
        let delta_vals: Vec<f64> = (0..n * h * w * nt * k * k * 2)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let init = Tensor::from_vec(vec![n, h, w, nt, 2], init_vals.clone()).unwrap();
        let delta = Tensor::from_vec(vec![n, h, w, nt, k, k, 2], delta_vals.clone()).unwrap();
        let field = build_neighbors(&init, &OffsetGrid { delta, k }, 3, h, w).unwrap();
        let got = field.neighbors.to_vec();
        let clampf = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
        for pi in 0..n * h * w * nt {
            let cy = init_vals[pi * 2] + delta_vals[(pi * k * k + kc * k + kc) * 2];
            let cx = init_vals[pi * 2 + 1] + delta_vals[(pi * k * k + kc * k + kc) * 2 + 1];
            let (cy, cx) = (clampf(cy, h), clampf(cx, w));
            for ky in 0..k {
                for kx in 0..k {
                    let o = (pi * k * k + ky * k + kx) * 2;
                    let (want_y, want_x) = if ky == kc && kx == kc {
                        (cy, cx)
                    } else {
                        (
                            clampf(cy + (ky as f64 - kc as f64) + delta_vals[o], h),
                            clampf(cx + (kx as f64 - kc as f64) + delta_vals[o + 1], w),
                        )
                    };
                    assert!((got[o] - want_y).abs() < 1e-12, "{} vs {}", got[o], want_y);
                    assert!((got[o + 1] - want_x).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighbors_stay_in_range_and_center_equals_refined() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, h, w, k) = (2, 3, 3, 3);
        let assoc = assoc_from(n, h, w, 1, 33);
        let init = initial_correspondence(&assoc).unwrap();
        let delta_vals: Vec<f64> = (0..n * h * w * n * k * k * 2)
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let delta = Tensor::from_vec(vec![n, h, w, n, k, k, 2], delta_vals).unwrap();
        let field = build_neighbors(&init, &OffsetGrid { delta, k }, 4, h, w).unwrap();
        let nb = field.neighbors.to_vec();
        for pair in nb.chunks_exact(2) {
            assert!(pair[0] >= 0.0 && pair[0] <= (h - 1) as f64);
            assert!(pair[1] >= 0.0 && pair[1] <= (w - 1) as f64);
        }
        let refined = field.refined.to_vec();
        let kc = (k - 1) / 2;
        for pi in 0..n * h * w * n {
            let o = (pi * k * k + kc * k + kc) * 2;
            assert_eq!(nb[o], refined[pi * 2]);
            assert_eq!(nb[o + 1], refined[pi * 2 + 1]);
        }
    }

    #[test]
    fn condense_at_integer_coords_is_brute_force_index_selection() {
        let (n, h, w, l, k) = (2, 4, 4, 2, 3);
        let assoc = assoc_from(n, h, w, l, 21);
        let init = initial_correspondence(&assoc).unwrap();
        let window = fixed_window(&init, k, h, w).unwrap();
        let condensed = condense(&assoc, &window).unwrap();
        let got = condensed.values.to_vec();
        let coords = window.to_vec();
        let data = assoc.values.to_vec();
        let m = n * h * w;
        for pi in 0..m * n {
            for kk in 0..k * k {
                let y = coords[(pi * k * k + kk) * 2] as usize;
                let x = coords[(pi * k * k + kk) * 2 + 1] as usize;
                let (p, j) = (pi / n, pi % n);
                for li in 0..l {
                    let want = data[(p * m + j * h * w + y * w + x) * l + li];
                    let have = got[(pi * k * k + kk) * l + li];
                    assert_eq!(want, have);
                }
            }
        }
    }

    #[test]
    fn k1_condense_picks_max_similarity_associations() {
        let (n, h, w, l) = (2, 3, 3, 1);
        let assoc = assoc_from(n, h, w, l, 5);
        let init = initial_correspondence(&assoc).unwrap();
        let window = fixed_window(&init, 1, h, w).unwrap();
        let condensed = condense(&assoc, &window).unwrap();
        let got = condensed.values.to_vec();
        let data = assoc.values.to_vec();
        let ic = init.to_vec();
        let m = n * h * w;
        for pi in 0..m * n {
            let (p, j) = (pi / n, pi % n);
            let (y, x) = (ic[pi * 2] as usize, ic[pi * 2 + 1] as usize);
            assert_eq!(got[pi], data[(p * m + j * h * w + y * w + x) * l]);
        }
    }

    fn toy_agg() -> (AggConfig, AggParams, LinearParams) {
        let cfg = AggConfig {
            layers: vec![AggLayerSpec { target_channels: 3, source_channels: 4, downsample: 2 }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = AggParams::init(&cfg, 1, &mut rng, DType::F64).unwrap();
        let head = LinearParams::zeros(4, 3 * 3 * 2, DType::F64).unwrap();
        (cfg, params, head)
    }

    #[test]
    fn zero_init_head_makes_cac_equal_sac() {
        let (cfg, params, head) = toy_agg();
        let assoc = assoc_from(2, 4, 4, 1, 50);
        let (sac, _, _) = cac_pass(
            &assoc, &cfg, &params, None, &head, 3, CondenseMode::Sac, OffsetBound::None,
        )
        .unwrap();
        let (cac, _, _) = cac_pass(
            &assoc, &cfg, &params, None, &head, 3, CondenseMode::Cac, OffsetBound::None,
        )
        .unwrap();
        assert_eq!(sac.values.to_vec(), cac.values.to_vec());
    }

    #[test]
    fn sac_output_shape_honors_configured_k9() {
        let cfg = AggConfig {
            layers: vec![AggLayerSpec { target_channels: 2, source_channels: 2, downsample: 2 }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = AggParams::init(&cfg, 1, &mut rng, DType::F64).unwrap();
        let head = LinearParams::zeros(2, 9 * 9 * 2, DType::F64).unwrap();
        let assoc = assoc_from(2, 16, 16, 1, 52);
        let (condensed, _, _) = cac_pass(
            &assoc, &cfg, &params, None, &head, 9, CondenseMode::Sac, OffsetBound::None,
        )
        .unwrap();
        assert_eq!(condensed.values.shape(), &[2, 16, 16, 2, 9, 9, 1]);
    }

    #[test]
    fn offset_head_receives_gradient() {
        let cfg = AggConfig {
            layers: vec![AggLayerSpec { target_channels: 2, source_channels: 3, downsample: 2 }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = AggParams::init(&cfg, 1, &mut rng, DType::F64).unwrap();
        let head = LinearParams::zeros(3, 3 * 3 * 2, DType::F64).unwrap();
        let feats = Tensor::param(
            vec![2, 4, 4, 3],
            {
                let mut r = ChaCha8Rng::seed_from_u64(43);
                (0..96).map(|_| r.gen_range(-1.0..1.0)).collect()
            },
            DType::F64,
        )
        .unwrap();
        let assoc = crate::hyper::compute_hac(4, &[feats]).unwrap();
        let (_, feat, _) = cac_pass(
            &assoc, &cfg, &params, None, &head, 3, CondenseMode::Cac, OffsetBound::None,
        )
        .unwrap();
        let loss = feat.pooled.mul(&feat.pooled).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let g = head.weight.grad().expect("offset head should receive gradient");
        assert!(g.iter().any(|&v| v != 0.0), "gradient into offset head is all zero");
    }
}
