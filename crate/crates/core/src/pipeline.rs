//! Progressive association generation and decoding.
//!
//! The association stages run from coarse to fine (5 down to 3). Each stage
//! builds its hyperassociation from the current (possibly enhanced)
//! features, condenses and aggregates it into association features, and
//! those features enhance the next stage's encoder features before its
//! hyperassociation is computed. The top stage always uses raw features.
//! Association features are finally fused into the decoder features and a
//! top-down FPN produces the co-saliency map.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agg::{aggregate, AggConfig, AggParams, AssociationFeature};
use crate::correspond::{cac_pass, CondenseMode, CorrespondenceField, OffsetBound};
use crate::encoder::{encode, EncoderConfig, EncoderParams, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::hyper::compute_hac;
use crate::nn::{ConvParams, LinearParams};
use crate::tensor::{DType, Padding, Tensor};

/// How inter-image associations enter the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssocMode {
    /// Plain FPN, no association features (baseline).
    Off,
    /// Full-pixel hyperassociation aggregation.
    Full,
    /// Heuristic-window condensation only.
    Sac,
    /// Two-pass condensation with learned offsets.
    Cac,
}

/// Cross-stage wiring variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Progressive: association features enhance the next stage's features.
    Pag,
    /// Separate: stages run independently (no cross-stage term).
    Sag,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: AssocMode,
    pub variant: Variant,
    /// Requested condensation window; clamped per stage to the largest odd
    /// value that fits the stage extent.
    pub k: usize,
    /// Association stages, subset of 3..=5.
    pub stages: Vec<usize>,
    pub decoder_channels: usize,
    /// Share aggregation weights between the two condensation passes.
    pub shared_agg_weights: bool,
    pub offset_bound: OffsetBound,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: AssocMode::Cac,
            variant: Variant::Pag,
            k: 9,
            stages: vec![3, 4, 5],
            decoder_channels: 32,
            shared_agg_weights: true,
            offset_bound: OffsetBound::None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::invalid("window K must be odd and >= 1"));
        }
        if self.stages.is_empty() && self.mode != AssocMode::Off {
            return Err(Error::invalid("association modes need at least one stage"));
        }
        let mut sorted = self.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.stages.len() || sorted.iter().any(|&s| !(3..=5).contains(&s)) {
            return Err(Error::invalid("stages must be distinct values in 3..=5"));
        }
        if self.decoder_channels == 0 {
            return Err(Error::invalid("decoder channels must be >= 1"));
        }
        Ok(())
    }

    /// Stages sorted ascending.
    pub fn sorted_stages(&self) -> Vec<usize> {
        let mut s = self.stages.clone();
        s.sort_unstable();
        s
    }
}

/// Largest odd window not exceeding the configured K or the stage extent.
pub fn effective_k(cfg_k: usize, h: usize, w: usize) -> usize {
    let cap = cfg_k.min(h).min(w).max(1);
    if cap.is_multiple_of(2) {
        cap - 1
    } else {
        cap
    }
}

/// The three config sections the model needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub agg: AggConfig,
    pub pipeline: PipelineConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.agg.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    /// Effective condensation window of one stage at the configured size.
    pub fn stage_k(&self, stage: usize) -> usize {
        let (h, w) = self.encoder.stage_size(stage);
        effective_k(self.pipeline.k, h, w)
    }
}

/// Per-association-stage trainables.
pub struct StageParams {
    pub agg: AggParams,
    /// Separate second-pass aggregation weights (only when unshared).
    pub agg_second: Option<AggParams>,
    pub offset_head: LinearParams,
    /// Fusion conv mapping the association feature onto the decoder feature.
    pub fuse: ConvParams,
}

/// Enhancement of one stage's features by the previous association feature.
pub struct EnhanceParams {
    pub conv: ConvParams,
    /// Channel-matching 1x1 conv for the incoming association feature, when
    /// its channels differ from the stage's.
    pub proj: Option<ConvParams>,
}

pub struct DecoderParams {
    pub lateral: Vec<ConvParams>,
    pub smooth: Vec<ConvParams>,
    pub head: ConvParams,
}

pub struct ModelParams {
    pub encoder: EncoderParams,
    pub stages: BTreeMap<usize, StageParams>,
    /// Keyed by the stage being enhanced.
    pub enhance: BTreeMap<usize, EnhanceParams>,
    pub decoder: DecoderParams,
}

/// The full model: configuration plus parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub dtype: DType,
}

/// One forward pass over a group.
pub struct ForwardOutput {
    /// `[N, H, W, 1]` pre-sigmoid.
    pub logits: Tensor,
    /// `[N, H, W, 1]` in (0,1).
    pub prob: Tensor,
    pub assoc_feats: BTreeMap<usize, AssociationFeature>,
    pub fields: BTreeMap<usize, CorrespondenceField>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Model> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&cfg.encoder, &mut rng, dtype)?;

        let mut stages = BTreeMap::new();
        let c_out = cfg.agg.final_channels();
        if cfg.pipeline.mode != AssocMode::Off {
            for &s in &cfg.pipeline.sorted_stages() {
                let layers_in = cfg.encoder.stage_layers(s);
                let agg = AggParams::init(&cfg.agg, layers_in, &mut rng, dtype)?;
                let agg_second = if cfg.pipeline.shared_agg_weights {
                    None
                } else {
                    Some(AggParams::init(&cfg.agg, layers_in, &mut rng, dtype)?)
                };
                let k = cfg.stage_k(s);
                // Zero-initialized so training starts from the heuristic
                // window.
                let offset_head = LinearParams::zeros(c_out, k * k * 2, dtype)?;
                let fuse = ConvParams::init(&mut rng, 3, 3, c_out, cfg.encoder.stage_channels(s), dtype)?;
                stages.insert(s, StageParams { agg, agg_second, offset_head, fuse });
            }
        }

        let mut enhance = BTreeMap::new();
        if cfg.pipeline.mode != AssocMode::Off {
            let sorted = cfg.pipeline.sorted_stages();
            for pair in sorted.windows(2) {
                let lower = pair[0];
                let c_lower = cfg.encoder.stage_channels(lower);
                let conv = ConvParams::init(&mut rng, 3, 3, c_lower, c_lower, dtype)?;
                let proj = if c_out != c_lower {
                    Some(ConvParams::init(&mut rng, 1, 1, c_out, c_lower, dtype)?)
                } else {
                    None
                };
                enhance.insert(lower, EnhanceParams { conv, proj });
            }
        }

        let d = cfg.pipeline.decoder_channels;
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for s in 1..=NUM_STAGES {
            lateral.push(ConvParams::init(&mut rng, 1, 1, cfg.encoder.stage_channels(s), d, dtype)?);
            smooth.push(ConvParams::init(&mut rng, 3, 3, d, d, dtype)?);
        }
        let head = ConvParams::init(&mut rng, 1, 1, d, 1, dtype)?;
        let decoder = DecoderParams { lateral, smooth, head };

        Ok(Model {
            cfg,
            params: ModelParams { encoder, stages, enhance, decoder },
            dtype,
        })
    }

    /// All trainable tensors with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.encoder.collect_named(&mut out);
        for (s, sp) in &self.params.stages {
            sp.agg.collect_named(&format!("stage{s}.agg"), &mut out);
            if let Some(second) = &sp.agg_second {
                second.collect_named(&format!("stage{s}.agg2"), &mut out);
            }
            sp.offset_head.collect_named(&format!("stage{s}.offset"), &mut out);
            sp.fuse.collect_named(&format!("stage{s}.fuse"), &mut out);
        }
        for (s, ep) in &self.params.enhance {
            ep.conv.collect_named(&format!("enh{s}.conv"), &mut out);
            if let Some(p) = &ep.proj {
                p.collect_named(&format!("enh{s}.proj"), &mut out);
            }
        }
        for (i, l) in self.params.decoder.lateral.iter().enumerate() {
            l.collect_named(&format!("dec.lat{}", i + 1), &mut out);
        }
        for (i, sm) in self.params.decoder.smooth.iter().enumerate() {
            sm.collect_named(&format!("dec.smooth{}", i + 1), &mut out);
        }
        self.params.decoder.head.collect_named("dec.head", &mut out);
        out
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let pyr = encode(images, &self.cfg.encoder, &self.params.encoder)?;
        let (assoc_feats, fields) = if self.cfg.pipeline.mode == AssocMode::Off {
            (BTreeMap::new(), BTreeMap::new())
        } else {
            run_pag(&pyr, &self.cfg, &self.params)?
        };
        let (logits, prob) = fuse_and_decode(&pyr, &assoc_feats, &self.cfg, &self.params)?;
        Ok(ForwardOutput { logits, prob, assoc_feats, fields })
    }
}

/// Enhance one stage's layer features with an upsampled association feature.
///
/// `conv(F + resize(proj?(assoc)))` per layer; with no association feature
/// (separate-variant wiring) the conv applies to the raw features alone.
pub fn enhance_features(
    layer_feats: &[Tensor],
    assoc_pooled: Option<&Tensor>,
    params: &EnhanceParams,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(layer_feats.len());
    let add_term = match assoc_pooled {
        Some(f) => {
            let f = match &params.proj {
                Some(p) => p.apply(f, 1, Padding::Same)?,
                None => f.clone(),
            };
            let target = layer_feats[0].shape();
            Some(f.bilinear_resize(target[1], target[2])?)
        }
        None => None,
    };
    for feat in layer_feats {
        let summed = match &add_term {
            Some(t) => feat.add(t)?,
            None => feat.clone(),
        };
        out.push(params.conv.apply(&summed, 1, Padding::Same)?);
    }
    Ok(out)
}

/// The coarse-to-fine association loop.
///
/// Returns the per-stage association features and (in condensation modes)
/// correspondence fields.
#[allow(clippy::type_complexity)]
pub fn run_pag(
    pyr: &FeaturePyramid,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<(BTreeMap<usize, AssociationFeature>, BTreeMap<usize, CorrespondenceField>)> {
    let stages_desc: Vec<usize> = cfg.pipeline.sorted_stages().into_iter().rev().collect();
    let mut feats = BTreeMap::new();
    let mut fields = BTreeMap::new();
    let mut pending_assoc: Option<Tensor> = None;

    for (idx, &s) in stages_desc.iter().enumerate() {
        let raw = pyr
            .pag_features
            .get(&s)
            .ok_or_else(|| Error::invalid(format!("stage {s} missing from pyramid")))?;
        let sp = &params.stages[&s];

        // Top stage uses raw features; lower stages pass through their
        // enhancement conv, with the cross-stage term only in progressive
        // wiring.
        let hac_inputs: Vec<Tensor> = if idx == 0 {
            raw.clone()
        } else {
            let ep = params
                .enhance
                .get(&s)
                .ok_or_else(|| Error::invalid(format!("no enhancement params for stage {s}")))?;
            let assoc = match cfg.pipeline.variant {
                Variant::Pag => pending_assoc.as_ref(),
                Variant::Sag => None,
            };
            enhance_features(raw, assoc, ep)?
        };

        let assoc = compute_hac(s, &hac_inputs)?;
        let feat = match cfg.pipeline.mode {
            AssocMode::Full => aggregate(&assoc.values, &cfg.agg, &sp.agg)?,
            AssocMode::Sac | AssocMode::Cac => {
                let mode = if cfg.pipeline.mode == AssocMode::Sac {
                    CondenseMode::Sac
                } else {
                    CondenseMode::Cac
                };
                let k = cfg.stage_k(s);
                let (_, feat, field) = cac_pass(
                    &assoc,
                    &cfg.agg,
                    &sp.agg,
                    sp.agg_second.as_ref(),
                    &sp.offset_head,
                    k,
                    mode,
                    cfg.pipeline.offset_bound,
                )?;
                fields.insert(s, field);
                feat
            }
            AssocMode::Off => unreachable!("run_pag is not called in off mode"),
        };
        pending_assoc = Some(feat.pooled.clone());
        feats.insert(s, feat);
    }
    Ok((feats, fields))
}

/// Fuse association features into the decoder features and run the top-down
/// FPN decode to full-resolution logits and probabilities.
pub fn fuse_and_decode(
    pyr: &FeaturePyramid,
    assoc_feats: &BTreeMap<usize, AssociationFeature>,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<(Tensor, Tensor)> {
    let mut dec: BTreeMap<usize, Tensor> = BTreeMap::new();
    for s in 1..=NUM_STAGES {
        let mut f = pyr.dec_features[&s].clone();
        if let Some(feat) = assoc_feats.get(&s) {
            let fused = params.stages[&s].fuse.apply(&feat.pooled, 1, Padding::Same)?;
            f = f.add(&fused)?;
        }
        dec.insert(s, f);
    }

    let mut top: Option<Tensor> = None;
    for s in (1..=NUM_STAGES).rev() {
        let lat = params.decoder.lateral[s - 1].apply(&dec[&s], 1, Padding::Same)?;
        let merged = match top {
            Some(above) => {
                let sh = lat.shape();
                lat.add(&above.bilinear_resize(sh[1], sh[2])?)?
            }
            None => lat,
        };
        top = Some(params.decoder.smooth[s - 1].apply(&merged, 1, Padding::Same)?.relu()?);
    }
    let p1 = top.unwrap();
    let logits = params.decoder.head.apply(&p1, 1, Padding::Same)?;
    let (h, w) = cfg.encoder.input_size;
    let logits = logits.bilinear_resize(h, w)?;
    let prob = logits.sigmoid()?;
    Ok((logits, prob))
}
