//! Gradient verification entry points: the per-op sweep and the end-to-end
//! toy problem.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::agg::{AggConfig, AggLayerSpec};
use crate::data::synth_group;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::pipeline::{AssocMode, Model, ModelConfig, PipelineConfig, Variant};
use crate::runconfig::LossConfig;
use crate::tensor::{grad_check, op_gradcheck_cases, DType};
use crate::train::group_loss;

/// Outcome of one gradient check.
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// Sweep every registered op once with the given seed.
pub fn run_op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in op_gradcheck_cases(seed) {
        let err = case.run()?;
        out.push(CheckResult { name: case.name.to_string(), max_rel_error: err });
    }
    Ok(out)
}

/// The 2-image 16x16 toy model used by the end-to-end check: full loss
/// (BCE + IoU + cycle consistency) in CAC mode over all three stages.
pub fn toy_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: [3, 4, 4, 4, 4],
            layers: [1, 1, 1, 1, 1],
            input_size: (16, 16),
            post_relu_features: true,
        },
        agg: AggConfig {
            layers: vec![AggLayerSpec { target_channels: 2, source_channels: 3, downsample: 2 }],
        },
        pipeline: PipelineConfig {
            mode: AssocMode::Cac,
            variant: Variant::Pag,
            k: 3,
            decoder_channels: 4,
            ..Default::default()
        },
    };
    let model = Model::new(cfg, seed, DType::F64)?;
    // Offset heads are zero-initialized by design, which parks every sampling
    // coordinate exactly on the integer grid where the bilinear interpolation
    // kinks. Small random offsets move the toy to a smooth point so central
    // differences are valid.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f66_7365);
    for sp in model.params.stages.values() {
        for t in [&sp.offset_head.weight, &sp.offset_head.bias] {
            let v: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            t.set_data(v)?;
        }
    }
    Ok(model)
}

/// Gradient-check the full training loss of the toy model against central
/// differences over every parameter entry.
pub fn end_to_end_gradcheck(seed: u64, eps: f64) -> Result<f64> {
    let model = toy_model(seed)?;
    let group = synth_group(seed.wrapping_add(17), 2, (16, 16), None)?;
    let loss_cfg = LossConfig::default();
    let named = model.named_params();
    let params: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        || {
            let (total, _, _) = group_loss(&model, &group, &loss_cfg)?;
            Ok(total)
        },
        &params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_builds_and_runs() {
        let model = toy_model(1).unwrap();
        let group = synth_group(2, 2, (16, 16), None).unwrap();
        let (total, report, _) = group_loss(&model, &group, &LossConfig::default()).unwrap();
        assert!(total.scalar().unwrap().is_finite());
        assert!(report.occ_stages.len() == 3);
    }

    #[test]
    fn corrupted_gather_backward_is_detected() {
        use crate::tensor::{set_gather_backward_corruption, Tensor};
        let src = Tensor::param(
            vec![1, 4, 4, 2],
            (0..32).map(|i| ((i * 37 % 19) as f64).sin()).collect(),
            DType::F64,
        )
        .unwrap();
        let coords = Tensor::param(vec![1, 3, 2], vec![0.4, 1.6, 2.3, 0.7, 1.5, 2.5], DType::F64)
            .unwrap();
        let f = || {
            let y = src.gather(&coords)?;
            y.mul(&y)?.sum_all()
        };
        let clean = grad_check(f, &[src.clone(), coords.clone()], 1e-5).unwrap();
        assert!(clean < 1e-6, "clean gather should pass, got {clean}");

        set_gather_backward_corruption(true);
        let corrupted = grad_check(f, &[src.clone(), coords.clone()], 1e-5).unwrap();
        set_gather_backward_corruption(false);
        assert!(corrupted > 1e-3, "corruption went undetected: {corrupted}");
    }
}
