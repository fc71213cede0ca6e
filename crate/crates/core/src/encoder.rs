//! Staged convolutional encoder.
//!
//! A small VGG-style stack: five stages of 3x3 same-padding conv + ReLU
//! layers with 2x2 max pooling between stages, so stage `s` runs at
//! `input / 2^(s-1)` resolution. The association stages (3-5) expose every
//! layer's activation; the decoder takes the last activation of all five
//! stages.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::{DType, Padding, Tensor};

pub const NUM_STAGES: usize = 5;
pub const ASSOC_STAGES: [usize; 3] = [3, 4, 5];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels per stage.
    pub channels: [usize; NUM_STAGES],
    /// Conv layers per stage (each 3x3 same + ReLU).
    pub layers: [usize; NUM_STAGES],
    /// Input image size (height, width); both must be divisible by 16.
    pub input_size: (usize, usize),
    /// Feed post-ReLU activations (the emitted ones) into the association
    /// stages; `false` switches to the pre-ReLU conv outputs.
    pub post_relu_features: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 64, 64],
            layers: [1, 1, 2, 2, 2],
            input_size: (64, 64),
            post_relu_features: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.iter().any(|&l| l < 1) {
            return Err(Error::invalid("encoder needs at least one layer per stage"));
        }
        if self.channels.iter().any(|&c| c < 1) {
            return Err(Error::invalid("encoder channels must be >= 1"));
        }
        let (h, w) = self.input_size;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!(
                "input size {h}x{w} must be divisible by 16"
            )));
        }
        Ok(())
    }

    /// Spatial size of stage `s` (1-based): input halved per stage.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        let (h, w) = self.input_size;
        (h >> (stage - 1), w >> (stage - 1))
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels[stage - 1]
    }

    pub fn stage_layers(&self, stage: usize) -> usize {
        self.layers[stage - 1]
    }
}

#[derive(Clone)]
pub struct EncoderParams {
    /// `stages[s-1][l]` is layer `l` of stage `s`.
    pub stages: Vec<Vec<ConvParams>>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, dtype: DType) -> Result<EncoderParams> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3usize;
        for s in 0..NUM_STAGES {
            let mut layers = Vec::with_capacity(cfg.layers[s]);
            for _ in 0..cfg.layers[s] {
                layers.push(ConvParams::init(rng, 3, 3, cin, cfg.channels[s], dtype)?);
                cin = cfg.channels[s];
            }
            stages.push(layers);
        }
        Ok(EncoderParams { stages })
    }

    pub fn collect_named(&self, out: &mut Vec<(String, Tensor)>) {
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, conv) in stage.iter().enumerate() {
                conv.collect_named(&format!("enc.s{}.l{}", s + 1, l), out);
            }
        }
    }
}

/// Per-group encoder outputs: every layer of the association stages plus the
/// last layer of all five stages for the decoder.
pub struct FeaturePyramid {
    /// `pag_features[&s][l]`: `[N, H_s, W_s, C_s]` for s in 3..=5.
    pub pag_features: BTreeMap<usize, Vec<Tensor>>,
    /// `dec_features[&s]`: last-layer activation of stage s, s in 1..=5.
    pub dec_features: BTreeMap<usize, Tensor>,
}

/// Run the encoder on `images [N,H,W,3]` with values in `[0,1]`.
pub fn encode(images: &Tensor, cfg: &EncoderConfig, params: &EncoderParams) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::shape(
            "encode",
            format!("expected [N,H,W,3], got {shape:?}"),
        ));
    }
    if (shape[1], shape[2]) != cfg.input_size {
        return Err(Error::shape(
            "encode",
            format!(
                "input {}x{} does not match configured size {}x{}",
                shape[1], shape[2], cfg.input_size.0, cfg.input_size.1
            ),
        ));
    }
    {
        let d = images.data();
        if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("encode expects image values in [0,1]"));
        }
    }

    let mut pag_features = BTreeMap::new();
    let mut dec_features = BTreeMap::new();
    let mut x = images.clone();
    for s in 1..=NUM_STAGES {
        if s > 1 {
            x = x.maxpool2()?;
        }
        let mut stage_feats = Vec::with_capacity(cfg.stage_layers(s));
        for conv in &params.stages[s - 1] {
            let pre = conv.apply(&x, 1, Padding::Same)?;
            let post = pre.relu()?;
            stage_feats.push(if cfg.post_relu_features { post.clone() } else { pre });
            x = post;
        }
        if ASSOC_STAGES.contains(&s) {
            pag_features.insert(s, stage_feats);
        }
        dec_features.insert(s, x.clone());
    }
    Ok(FeaturePyramid { pag_features, dec_features })
}
