//! Association aggregation network.
//!
//! Squeezes the per-pixel 4-D association block `[Nt, th, tw, L]` carried by
//! every source pixel into a C-vector. Each aggregation layer applies a
//! shared 3x3 conv over the target spatial dims, a bilinear downsample of
//! those dims, and a shared 3x3 conv over the source spatial dims. Whatever
//! target extent remains after the last layer is mean-pooled away, and the
//! target image dim is averaged out at the very end.
//!
//! The convs never touch the target image dim (images are unordered) and are
//! agnostic to the target extent, so the same weights serve both full-pixel
//! (`th x tw = H x W`) and condensed (`K x K`) associations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::{DType, Padding, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AggLayerSpec {
    /// Channels of the target-dim conv.
    pub target_channels: usize,
    /// Channels of the source-dim conv.
    pub source_channels: usize,
    /// Bilinear downsample factor applied to the target dims (>= 2).
    pub downsample: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AggConfig {
    pub layers: Vec<AggLayerSpec>,
}

impl Default for AggConfig {
    fn default() -> Self {
        AggConfig {
            layers: vec![
                AggLayerSpec { target_channels: 16, source_channels: 16, downsample: 2 },
                AggLayerSpec { target_channels: 16, source_channels: 64, downsample: 2 },
            ],
        }
    }
}

impl AggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("aggregation needs at least one layer"));
        }
        for l in &self.layers {
            if l.downsample < 2 {
                return Err(Error::invalid("aggregation downsample factor must be >= 2"));
            }
            if l.target_channels < 1 || l.source_channels < 1 {
                return Err(Error::invalid("aggregation channels must be >= 1"));
            }
        }
        Ok(())
    }

    /// Channels of the emitted association feature.
    pub fn final_channels(&self) -> usize {
        self.layers.last().map(|l| l.source_channels).unwrap_or(0)
    }

    /// Target extent after each layer's downsample, starting from `t0`.
    pub fn target_extent_chain(&self, t0: usize) -> Vec<usize> {
        let mut t = t0;
        let mut chain = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            t = t.div_ceil(l.downsample).max(1);
            chain.push(t);
        }
        chain
    }
}

#[derive(Clone)]
pub struct AggLayerParams {
    pub target: ConvParams,
    pub source: ConvParams,
}

#[derive(Clone)]
pub struct AggParams {
    pub layers: Vec<AggLayerParams>,
}

impl AggParams {
    pub fn init(
        cfg: &AggConfig,
        in_layers: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<AggParams> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut cin = in_layers;
        for spec in &cfg.layers {
            let target = ConvParams::init(rng, 3, 3, cin, spec.target_channels, dtype)?;
            let source = ConvParams::init(rng, 3, 3, spec.target_channels, spec.source_channels, dtype)?;
            cin = spec.source_channels;
            layers.push(AggLayerParams { target, source });
        }
        Ok(AggParams { layers })
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.target.collect_named(&format!("{prefix}.l{i}.target"), out);
            l.source.collect_named(&format!("{prefix}.l{i}.source"), out);
        }
    }
}

/// Aggregated association features of one stage.
#[derive(Clone)]
pub struct AssociationFeature {
    /// `[N, H, W, Nt, C]`: the feature of each source pixel toward each
    /// target image.
    pub per_target: Tensor,
    /// `[N, H, W, C]`: mean of `per_target` over the target image dim.
    pub pooled: Tensor,
}

fn check_assoc_rank(op: &'static str, a: &Tensor) -> Result<[usize; 7]> {
    let s = a.shape();
    if s.len() != 7 {
        return Err(Error::shape(
            op,
            format!("association tensor must be [N,H,W,Nt,th,tw,C], got {s:?}"),
        ));
    }
    Ok([s[0], s[1], s[2], s[3], s[4], s[5], s[6]])
}

/// Shared 3x3 same conv over the target spatial dims of every
/// `(i, h, w, j)` slice.
pub fn target_conv(a: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let [n, h, w, nt, th, tw, c] = check_assoc_rank("target_conv", a)?;
    let flat = a.reshape(&[n * h * w * nt, th, tw, c])?;
    let out = conv.apply(&flat, 1, Padding::Same)?;
    out.reshape(&[n, h, w, nt, th, tw, conv.out_channels()])
}

/// Bilinear downsample of the target spatial dims by `factor` (ceil).
pub fn target_downsample(a: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return Err(Error::invalid("target_downsample factor must be >= 2"));
    }
    let [n, h, w, nt, th, tw, c] = check_assoc_rank("target_downsample", a)?;
    let (oh, ow) = (th.div_ceil(factor).max(1), tw.div_ceil(factor).max(1));
    let flat = a.reshape(&[n * h * w * nt, th, tw, c])?;
    let out = flat.bilinear_resize(oh, ow)?;
    out.reshape(&[n, h, w, nt, oh, ow, c])
}

/// Shared 3x3 same conv over the source spatial dims of every
/// `(i, targets...)` slice.
pub fn source_conv(a: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let [n, h, w, nt, th, tw, c] = check_assoc_rank("source_conv", a)?;
    // Bring the source dims next to the channels: [N, Nt, th, tw, H, W, C].
    let moved = a.permute(&[0, 3, 4, 5, 1, 2, 6])?;
    let flat = moved.reshape(&[n * nt * th * tw, h, w, c])?;
    let out = flat.conv2d(&conv.kernel, &conv.bias, 1, Padding::Same)?;
    let co = conv.out_channels();
    out.reshape(&[n, nt, th, tw, h, w, co])?
        .permute(&[0, 4, 5, 1, 2, 3, 6])
}

/// Run the full aggregation stack on a `[N,H,W,Nt,th,tw,L]` association
/// tensor (full-pixel or condensed target dims).
pub fn aggregate(a: &Tensor, cfg: &AggConfig, params: &AggParams) -> Result<AssociationFeature> {
    cfg.validate()?;
    check_assoc_rank("aggregate", a)?;
    if params.layers.len() != cfg.layers.len() {
        return Err(Error::invalid("aggregation params do not match config"));
    }
    let mut cur = a.clone();
    for (i, (spec, layer)) in cfg.layers.iter().zip(&params.layers).enumerate() {
        cur = target_conv(&cur, &layer.target)?.relu()?;
        cur = target_downsample(&cur, spec.downsample)?;
        cur = source_conv(&cur, &layer.source)?;
        if i + 1 < cfg.layers.len() {
            cur = cur.relu()?;
        }
    }
    // Residual target extent mean-pools to 1x1; the target image dim is
    // averaged last.
    let per_target = cur.mean_axes(&[4, 5])?;
    let pooled = per_target.mean_axes(&[3])?;
    Ok(AssociationFeature { per_target, pooled })
}
