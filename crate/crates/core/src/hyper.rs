//! Hyperassociation construction and the condensed gather primitive.
//!
//! For one encoder stage, the hyperassociation collects the ReLU'd cosine
//! similarity between every pixel vector of every image and every pixel
//! vector of every other image, stacked over the stage's layers:
//! `[N, H, W, N, H, W, L]`. The first index triple addresses the querying
//! (source) pixel, the second the compared (target) pixel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

/// Full-pixel association tensor of one stage.
#[derive(Clone)]
pub struct Hyperassociation {
    /// `[N, H, W, N, H, W, L]`, entries in `[0, 1]`.
    pub values: Tensor,
    pub stage: usize,
}

impl Hyperassociation {
    pub fn group_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[6]
    }
}

/// Condensed counterpart: per source pixel and target image only the K x K
/// associations around the estimated correspondence survive, along with the
/// sampling coordinates that produced them.
#[derive(Clone)]
pub struct CondensedHyperassociation {
    /// `[N, H, W, N, K, K, L]`.
    pub values: Tensor,
    /// `[N, H, W, N, K, K, 2]` float target coordinates (row, col) in pixel
    /// units, clamped into `[0, H-1] x [0, W-1]`.
    pub coords: Tensor,
    pub stage: usize,
}

impl CondensedHyperassociation {
    pub fn window(&self) -> usize {
        self.values.shape()[4]
    }
}

/// Pairwise ReLU'd cosine similarities of all layer features of one stage,
/// stacked over layers.
///
/// Every layer feature must be `[N, H, W, C]` with matching dims. Costs one
/// normalization pass plus one `(N*H*W) x (N*H*W)` inner product per layer.
pub fn compute_hac(stage: usize, layer_features: &[Tensor]) -> Result<Hyperassociation> {
    let first = layer_features
        .first()
        .ok_or_else(|| Error::shape("compute_hac", "no layer features"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "compute_hac",
            format!("layer features must be [N,H,W,C], got {shape:?}"),
        ));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let m = n * h * w;
    let mut per_layer = Vec::with_capacity(layer_features.len());
    for f in layer_features {
        if f.shape() != shape.as_slice() {
            return Err(Error::shape(
                "compute_hac",
                format!("layer shape {:?} differs from {:?}", f.shape(), shape),
            ));
        }
        let unit = f.l2_normalize(NORM_EPS)?;
        let flat = unit.reshape(&[m, c])?;
        let sim = flat.matmul(&flat.permute(&[1, 0])?)?.relu()?;
        per_layer.push(sim.reshape(&[n, h, w, n, h, w])?);
    }
    let values = Tensor::stack_new_last(&per_layer)?;
    Ok(Hyperassociation { values, stage })
}

/// Sum a `[H, W, L]` association slice over its layer dim.
pub fn sum_similarity(slice: &Tensor) -> Result<Tensor> {
    if slice.shape().len() != 3 {
        return Err(Error::shape(
            "sum_similarity",
            format!("expected [H,W,L], got {:?}", slice.shape()),
        ));
    }
    slice.sum_axes(&[2])
}

/// Sum the full hyperassociation over its layer dim:
/// `[N,H,W,N,H,W,L] -> [N,H,W,N,H,W]`. Works on raw data (the result only
/// feeds the argmax, which is treated as a constant).
pub fn sum_layers_raw(assoc: &Hyperassociation) -> Vec<f64> {
    let l = assoc.layers();
    let data = assoc.values.data();
    data.chunks_exact(l).map(|c| c.iter().sum()).collect()
}

/// Sample one `[H, W, L]` association slice at `K x K` float coordinates.
///
/// Integer coordinates reduce to exact index selection; fractional ones
/// interpolate bilinearly, and gradients flow to both the slice values and
/// the coordinates. Out-of-range coordinates clamp to the border.
pub fn gather_condensed(slice: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let ss = slice.shape();
    let cs = coords.shape();
    if ss.len() != 3 || cs.len() != 3 || cs[2] != 2 {
        return Err(Error::shape(
            "gather_condensed",
            format!("expected slice [H,W,L] and coords [K,K,2], got {ss:?} and {cs:?}"),
        ));
    }
    let (h, w, l) = (ss[0], ss[1], ss[2]);
    let (k0, k1) = (cs[0], cs[1]);
    let src = slice.reshape(&[1, h, w, l])?;
    let flat = coords.reshape(&[1, k0 * k1, 2])?;
    src.gather(&flat)?.reshape(&[k0, k1, l])
}
