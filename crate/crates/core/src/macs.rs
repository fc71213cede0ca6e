//! Closed-form multiply-accumulate counts.
//!
//! Pure functions of the configuration and geometry; nothing is executed.
//! Counts cover multiplies in convolutions, inner products, bilinear
//! sampling (4 taps per output value), the offset head, and pooling scales;
//! data movement is excluded.

use crate::pipeline::ModelConfig;
use crate::tensor::DType;

/// Cost breakdown of one association stage.
#[derive(Clone, Debug)]
pub struct StageMacs {
    pub stage: usize,
    /// Effective condensation window at this stage.
    pub k: usize,
    /// Hyperassociation calculation (normalize + pairwise inner products).
    pub hac: u128,
    /// Bytes held by the full-pixel hyperassociation tensor.
    pub assoc_memory_bytes: u128,
    /// One aggregation pass over the full-pixel target extent.
    pub agg_full: u128,
    /// One aggregation pass over the condensed K x K extent.
    pub agg_condensed_single: u128,
    /// Both condensation passes plus gathers and the offset head.
    pub agg_condensed_two_pass: u128,
}

#[derive(Clone, Debug)]
pub struct MacsReport {
    pub n: usize,
    pub input: (usize, usize),
    pub per_stage: Vec<StageMacs>,
    pub encoder: u128,
    pub decoder: u128,
    pub agg_full_total: u128,
    pub agg_condensed_total: u128,
    /// condensed / full aggregation cost.
    pub ratio: f64,
}

fn conv_macs(h: usize, w: usize, kh: usize, kw: usize, cin: usize, cout: usize) -> u128 {
    (h * w) as u128 * (kh * kw * cin * cout) as u128
}

/// Memory of the full hyperassociation `[N,H,W,N,H,W,L]`.
pub fn assoc_memory_bytes(n: usize, h: usize, w: usize, l: usize, dtype: DType) -> u128 {
    (n * h * w) as u128 * (n * h * w) as u128 * l as u128 * dtype.size_bytes() as u128
}

/// Normalization pass plus one `(NHW) x (NHW)` inner product per layer.
pub fn hac_macs(n: usize, h: usize, w: usize, c: usize, l: usize) -> u128 {
    let m = (n * h * w) as u128;
    let normalize = 2 * m * c as u128 * l as u128;
    let products = m * m * c as u128 * l as u128;
    normalize + products
}

/// One aggregation pass: per layer a target conv, a bilinear target
/// downsample, and a source conv, then the residual target mean-pool and the
/// target-image mean.
pub fn agg_pass_macs(
    cfg: &ModelConfig,
    n: usize,
    h: usize,
    w: usize,
    t0: (usize, usize),
    in_channels: usize,
) -> u128 {
    let slices = (n * h * w * n) as u128;
    let (mut th, mut tw) = t0;
    let mut cin = in_channels;
    let mut total = 0u128;
    for layer in &cfg.agg.layers {
        total += slices * conv_macs(th, tw, 3, 3, cin, layer.target_channels);
        let (nh, nw) = (
            th.div_ceil(layer.downsample).max(1),
            tw.div_ceil(layer.downsample).max(1),
        );
        total += slices * (nh * nw * layer.target_channels) as u128 * 4;
        (th, tw) = (nh, nw);
        total += (n * n * th * tw) as u128 * conv_macs(h, w, 3, 3, layer.target_channels, layer.source_channels);
        cin = layer.source_channels;
    }
    // Mean over the residual target extent, then over target images.
    total += slices * (th * tw * cin) as u128 + slices * cin as u128 + (n * h * w * cin) as u128 * n as u128;
    total
}

/// Full cost model for one group of `n` images at `input` resolution.
pub fn count(cfg: &ModelConfig, n: usize, input: (usize, usize)) -> MacsReport {
    let mut geo_cfg = cfg.clone();
    geo_cfg.encoder.input_size = input;

    // Encoder.
    let mut encoder = 0u128;
    let mut cin = 3usize;
    for s in 1..=5usize {
        let (h, w) = geo_cfg.encoder.stage_size(s);
        for _ in 0..geo_cfg.encoder.stage_layers(s) {
            encoder += n as u128 * conv_macs(h, w, 3, 3, cin, geo_cfg.encoder.stage_channels(s));
            cin = geo_cfg.encoder.stage_channels(s);
        }
    }

    let c_assoc = geo_cfg.agg.final_channels();
    let mut per_stage = Vec::new();
    let mut agg_full_total = 0u128;
    let mut agg_condensed_total = 0u128;
    for &s in &geo_cfg.pipeline.sorted_stages() {
        let (h, w) = geo_cfg.encoder.stage_size(s);
        let c = geo_cfg.encoder.stage_channels(s);
        let l = geo_cfg.encoder.stage_layers(s);
        let k = geo_cfg.stage_k(s);
        let slices = (n * h * w * n) as u128;

        let full = agg_pass_macs(&geo_cfg, n, h, w, (h, w), l);
        let single = agg_pass_macs(&geo_cfg, n, h, w, (k, k), l);
        // Two passes plus both gathers (4 taps per sampled value) and the
        // offset head.
        let gather = slices * (k * k * l) as u128 * 4;
        let head = slices * (c_assoc * k * k * 2) as u128;
        let two_pass = 2 * single + 2 * gather + head;

        per_stage.push(StageMacs {
            stage: s,
            k,
            hac: hac_macs(n, h, w, c, l),
            assoc_memory_bytes: assoc_memory_bytes(n, h, w, l, DType::F64),
            agg_full: full,
            agg_condensed_single: single,
            agg_condensed_two_pass: two_pass,
        });
        agg_full_total += full;
        agg_condensed_total += two_pass;
    }

    // Decoder path: enhancement convs, fusion convs, laterals, smoothing,
    // head.
    let mut decoder = 0u128;
    let stages = geo_cfg.pipeline.sorted_stages();
    for pair in stages.windows(2) {
        let lower = pair[0];
        let (h, w) = geo_cfg.encoder.stage_size(lower);
        let c = geo_cfg.encoder.stage_channels(lower);
        let l = geo_cfg.encoder.stage_layers(lower);
        if c_assoc != c {
            decoder += n as u128 * conv_macs(h, w, 1, 1, c_assoc, c);
        }
        decoder += n as u128 * (h * w * c) as u128 * 4; // association upsample
        decoder += n as u128 * l as u128 * conv_macs(h, w, 3, 3, c, c);
    }
    for &s in &stages {
        let (h, w) = geo_cfg.encoder.stage_size(s);
        decoder += n as u128 * conv_macs(h, w, 3, 3, c_assoc, geo_cfg.encoder.stage_channels(s));
    }
    let d = geo_cfg.pipeline.decoder_channels;
    for s in 1..=5usize {
        let (h, w) = geo_cfg.encoder.stage_size(s);
        decoder += n as u128 * conv_macs(h, w, 1, 1, geo_cfg.encoder.stage_channels(s), d);
        decoder += n as u128 * conv_macs(h, w, 3, 3, d, d);
        if s < 5 {
            decoder += n as u128 * (h * w * d) as u128 * 4; // top-down upsample
        }
    }
    let (h1, w1) = geo_cfg.encoder.stage_size(1);
    decoder += n as u128 * conv_macs(h1, w1, 1, 1, d, 1);

    let ratio = if agg_full_total > 0 {
        agg_condensed_total as f64 / agg_full_total as f64
    } else {
        0.0
    };
    MacsReport {
        n,
        input,
        per_stage,
        encoder,
        decoder,
        agg_full_total,
        agg_condensed_total,
        ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::{AggConfig, AggLayerSpec};
    use crate::encoder::EncoderConfig;
    use crate::pipeline::PipelineConfig;

    fn cfg_one_layer() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: [2, 2, 2, 2, 2],
                layers: [1, 1, 1, 1, 1],
                input_size: (64, 64),
                post_relu_features: true,
            },
            agg: AggConfig {
                layers: vec![AggLayerSpec { target_channels: 3, source_channels: 5, downsample: 2 }],
            },
            pipeline: PipelineConfig { k: 3, stages: vec![5], ..Default::default() },
        }
    }

    #[test]
    fn one_layer_agg_macs_match_hand_count() {
        let cfg = cfg_one_layer();
        // Stage 5 at 64x64 input: 4x4, N=2; condensed window K=3.
        let got = agg_pass_macs(&cfg, 2, 4, 4, (3, 3), 1);
        let slices = 2u128 * 4 * 4 * 2;
        let tconv = slices * (3 * 3) as u128 * (9 * 3) as u128;
        let resize = slices * (2 * 2 * 3) as u128 * 4;
        let sconv = (2u128 * 2 * 2 * 2) * (4 * 4) as u128 * (9 * 3 * 5) as u128;
        let pools = slices * (2 * 2 * 5) as u128 + slices * 5 + (2u128 * 4 * 4 * 5) * 2;
        assert_eq!(got, tconv + resize + sconv + pools);
    }

    #[test]
    fn condensed_cost_is_below_full_at_reference_geometry() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.input_size = (256, 256);
        let report = count(&cfg, 6, (256, 256));
        assert!(report.agg_condensed_total < report.agg_full_total);
        assert!(report.ratio < 1.0);
    }

    #[test]
    fn ratio_decreases_with_smaller_k() {
        let mut last = f64::INFINITY;
        for k in [9usize, 5, 3] {
            let mut cfg = ModelConfig::default();
            cfg.encoder.input_size = (256, 256);
            cfg.pipeline.k = k;
            let r = count(&cfg, 6, (256, 256));
            assert!(r.ratio < last, "ratio {} not below {last} at K={k}", r.ratio);
            last = r.ratio;
        }
    }

    #[test]
    fn assoc_memory_formula_matches_materialized_tensor() {
        use crate::hyper::compute_hac;
        use crate::tensor::Tensor;
        let (n, h, w, c) = (2, 3, 3, 4);
        let f = Tensor::from_vec(
            vec![n, h, w, c],
            (0..n * h * w * c).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let a = compute_hac(5, &[f.clone(), f]).unwrap();
        let bytes = a.values.numel() as u128 * 8;
        assert_eq!(bytes, assoc_memory_bytes(n, h, w, 2, DType::F64));
    }

    #[test]
    fn counting_is_pure() {
        let cfg = ModelConfig::default();
        let a = count(&cfg, 6, (64, 64));
        let b = count(&cfg, 6, (64, 64));
        assert_eq!(a.agg_full_total, b.agg_full_total);
        assert_eq!(a.encoder, b.encoder);
    }
}
