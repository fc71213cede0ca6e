//! Training loop, Adam optimizer, and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::data::GroupSample;
use crate::error::{Error, Result};
use crate::loss::{bce_iou, occ_loss, LossReport, StageWarpInputs};
use crate::metrics::{evaluate_pair, MetricReport};
use crate::pipeline::{AssocMode, Model};
use crate::runconfig::LossConfig;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeConfig {
    #[default]
    F64,
    F32,
}

impl DTypeConfig {
    pub fn to_dtype(self) -> DType {
        match self {
            DTypeConfig::F64 => DType::F64,
            DTypeConfig::F32 => DType::F32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Initial learning rate; divided by `1/decay_factor` once at
    /// `decay_step`.
    pub lr: f64,
    /// Step at which the rate decays; default (None) decays at 2/3 of the
    /// schedule.
    pub decay_step: Option<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; None disables.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Checkpoint cadence in steps (a final checkpoint is always written).
    pub ckpt_every: usize,
    /// Evaluate on the training groups every this many steps (0 disables).
    pub eval_every: usize,
    pub dtype: DTypeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 1e-4,
            decay_step: None,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
            ckpt_every: 100,
            eval_every: 0,
            dtype: DTypeConfig::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 && self.steps > 0 && self.lr < 0.0 {
            return Err(Error::Config("train.lr must be >= 0".into()));
        }
        if let Some(d) = self.decay_step {
            if d > self.steps {
                return Err(Error::Config("train.decay_step must be <= steps".into()));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn effective_decay_step(&self) -> usize {
        self.decay_step.unwrap_or(self.steps * 2 / 3)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.effective_decay_step() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Adaptive-moment optimizer over a fixed parameter list.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)], beta1: f64, beta2: f64, eps: f64) -> Adam {
        let moments = params
            .iter()
            .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .collect();
        Adam { beta1, beta2, eps, t: 0, moments }
    }

    /// One update over all parameters from their accumulated gradients.
    /// Gradients are cleared afterwards. A missing gradient counts as zero.
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<()> {
        let mut grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        if let Some(max_norm) = clip_norm {
            let total: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if total > max_norm {
                let scale = max_norm / total;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params.iter().zip(&grads).zip(self.moments.iter_mut()) {
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(data)?;
            p.zero_grad();
        }
        Ok(())
    }
}

/// Compute all loss terms for one group forward pass.
pub fn group_loss(
    model: &Model,
    group: &GroupSample,
    loss_cfg: &LossConfig,
) -> Result<(Tensor, LossReport, crate::pipeline::ForwardOutput)> {
    let weights = loss_cfg.weights();
    let sample = group.with_dtype(model.dtype)?;
    let out = model.forward(&sample.images)?;
    let (bce_t, iou_t) = bce_iou(&out.prob, &sample.masks)
        .map_err(|e| Error::invalid(format!("bce/iou term: {e}")))?;

    let use_occ = weights.occ != 0.0
        && matches!(model.cfg.pipeline.mode, AssocMode::Sac | AssocMode::Cac);
    let (occ_t, occ_stages) = if use_occ {
        let mut stage_inputs = Vec::new();
        for (&s, field) in &out.fields {
            let (h, w) = model.cfg.encoder.stage_size(s);
            stage_inputs.push(StageWarpInputs {
                images: sample.resized_images(h, w)?,
                masks: sample.resized_masks(h, w)?,
                field: field.clone(),
            });
        }
        let (t, parts) = occ_loss(&stage_inputs, loss_cfg.ssim_window, loss_cfg.object_aware)
            .map_err(|e| Error::invalid(format!("occ term: {e}")))?;
        (Some(t), parts)
    } else {
        (None, BTreeMap::new())
    };

    let mut total = bce_t
        .scale(weights.bce)?
        .add(&iou_t.scale(weights.iou)?)?;
    if let Some(occ) = &occ_t {
        total = total.add(&occ.scale(weights.occ)?)?;
    }

    let occ_sum: f64 = occ_stages.values().sum();
    let report = LossReport {
        bce: bce_t.scalar()?,
        iou: iou_t.scalar()?,
        occ_stages,
        occ: occ_sum,
        total: total.scalar()?,
        weights,
    };
    Ok((total, report, out))
}

/// Run the optimization loop.
///
/// Per step: sample a group uniformly (with replacement), forward, total
/// loss, backward, clipped adaptive-moment update. Deterministic for a fixed
/// seed. Checkpoints land in `out_dir` at the configured cadence plus a
/// final `model.ckpt`. `on_step` observes every loss report.
#[allow(clippy::too_many_arguments)]
pub fn train(
    groups: &[GroupSample],
    model: &Model,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    config_hash: &str,
    config_text: Option<&str>,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, &LossReport, Option<&MetricReport>),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Data("training needs at least one group".into()));
    }
    let params = model.named_params();
    let mut opt = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let group = &groups[rng.gen_range(0..groups.len())];
        let (total, report, _) = group_loss(model, group, loss_cfg)
            .map_err(|e| Error::invalid(format!("step {step}: {e}")))?;
        if !report.total.is_finite() {
            return Err(Error::invalid(format!(
                "step {step}: non-finite total loss {}",
                report.total
            )));
        }
        total
            .backward()
            .map_err(|e| Error::invalid(format!("step {step}: backward: {e}")))?;
        opt.step(&params, cfg.lr_at(step), cfg.clip_norm)?;
        let eval_report = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            Some(evaluate(model, groups)?.1)
        } else {
            None
        };
        on_step(step, &report, eval_report.as_ref());
        reports.push(report);

        if let Some(dir) = out_dir {
            if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.steps {
                ckpt::save(
                    &dir.join(format!("step{step:06}.ckpt")),
                    &params,
                    cfg.dtype.to_dtype(),
                    config_hash,
                    config_text,
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        ckpt::save(&dir.join("model.ckpt"), &params, cfg.dtype.to_dtype(), config_hash, config_text)?;
    }
    Ok(reports)
}

/// Per-image metrics of one group under the current model parameters.
///
/// Groups at a different resolution than the model are resized for the
/// forward pass; predictions are resized back and scored at the ground-truth
/// resolution.
pub fn evaluate_group(model: &Model, group: &GroupSample) -> Result<Vec<MetricReport>> {
    let (gh, gw) = group.size();
    let (mh, mw) = model.cfg.encoder.input_size;
    let sample = group.with_dtype(model.dtype)?;
    let input = if (gh, gw) == (mh, mw) {
        sample.images.clone()
    } else {
        sample.resized_images(mh, mw)?
    };
    let out = model.forward(&input)?;
    let prob = if (gh, gw) == (mh, mw) {
        out.prob
    } else {
        out.prob.bilinear_resize(gh, gw)?
    };
    let pv = prob.to_vec();
    let gv = group.masks.to_vec();
    let per = gh * gw;
    (0..group.group_size())
        .map(|i| evaluate_pair(&pv[i * per..(i + 1) * per], &gv[i * per..(i + 1) * per], gh, gw))
        .collect()
}

/// Per-group, per-image metric reports.
pub type GroupReports = Vec<(String, Vec<MetricReport>)>;

/// Evaluate a whole dataset; returns per-group per-image reports plus the
/// image-mean summary.
pub fn evaluate(
    model: &Model,
    groups: &[GroupSample],
) -> Result<(GroupReports, MetricReport)> {
    if groups.is_empty() {
        return Err(Error::Data("evaluation needs at least one group".into()));
    }
    let mut per_group = Vec::new();
    let mut all = Vec::new();
    for g in groups {
        let reports = evaluate_group(model, g)?;
        all.extend(reports.iter().copied());
        per_group.push((g.name.clone(), reports));
    }
    Ok((per_group, MetricReport::mean(&all)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::{AggConfig, AggLayerSpec};
    use crate::data::synth_group;
    use crate::encoder::EncoderConfig;
    use crate::pipeline::{ModelConfig, PipelineConfig, Variant};

    fn tiny_model(mode: AssocMode, seed: u64) -> Model {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: [3, 4, 6, 6, 6],
                layers: [1, 1, 1, 1, 1],
                input_size: (32, 32),
                post_relu_features: true,
            },
            agg: AggConfig {
                layers: vec![AggLayerSpec { target_channels: 3, source_channels: 4, downsample: 2 }],
            },
            pipeline: PipelineConfig {
                mode,
                variant: Variant::Pag,
                k: 3,
                decoder_channels: 6,
                ..Default::default()
            },
        };
        Model::new(cfg, seed, DType::F64).unwrap()
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let p = Tensor::param(vec![1], vec![1.0], DType::F64).unwrap();
        let named = vec![("p".to_string(), p.clone())];
        let (b1, b2, eps, lr) = (0.9, 0.99, 1e-8, 0.1);
        let mut opt = Adam::new(&named, b1, b2, eps);

        // Scalar reference of the update rule.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            // Gradient of f(x) = x^2 / 2 is x.
            let loss = p.mul(&p).unwrap().scale(0.5).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            let g = theta;
            opt.step(&named, lr, None).unwrap();

            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (p.to_vec()[0] - theta).abs() < 1e-12,
                "step {t}: {} vs {theta}",
                p.to_vec()[0]
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_exact() {
        let model = tiny_model(AssocMode::Sac, 1);
        let group = synth_group(0, 2, (32, 32), None).unwrap();
        let before: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let cfg = TrainConfig { steps: 1, lr: 0.0, ..Default::default() };
        train(&[group], &model, &cfg, &LossConfig::default(), "-", None, None, |_, _, _| {}).unwrap();
        let after: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let groups = vec![
            synth_group(1, 2, (32, 32), None).unwrap(),
            synth_group(2, 2, (32, 32), None).unwrap(),
        ];
        let cfg = TrainConfig { steps: 4, lr: 1e-3, seed: 7, ..Default::default() };
        let run = || {
            let model = tiny_model(AssocMode::Cac, 3);
            train(&groups, &model, &cfg, &LossConfig::default(), "-", None, None, |_, _, _| {})
                .unwrap()
                .iter()
                .map(|r| r.total)
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(AssocMode::Cac, 5);
        let group = synth_group(3, 2, (32, 32), None).unwrap();
        let cfg = TrainConfig { steps: 2, lr: 1e-3, ckpt_every: 0, ..Default::default() };
        train(std::slice::from_ref(&group), &model, &cfg, &LossConfig::default(), "h", None, Some(dir.path()), |_, _, _| {})
            .unwrap();
        let out_before = model.forward(&group.images).unwrap().prob.to_vec();

        let fresh = tiny_model(AssocMode::Cac, 999);
        ckpt::load_into_model(&dir.path().join("model.ckpt"), &fresh).unwrap();
        let out_after = fresh.forward(&group.images).unwrap().prob.to_vec();
        assert_eq!(out_before, out_after);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(AssocMode::Sac, 6);
        let params = model.named_params();
        ckpt::save(&dir.path().join("m.ckpt"), &params, DType::F64, "h", None).unwrap();
        // A model with different channels must refuse the checkpoint.
        let other = {
            let mut cfg = model.cfg.clone();
            cfg.encoder.channels = [4, 4, 6, 6, 6];
            Model::new(cfg, 6, DType::F64).unwrap()
        };
        assert!(ckpt::load_into_model(&dir.path().join("m.ckpt"), &other).is_err());
    }

    #[test]
    fn empty_dataset_evaluation_errors() {
        let model = tiny_model(AssocMode::Off, 7);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn non_finite_values_abort_with_step_context() {
        let model = tiny_model(AssocMode::Off, 8);
        // Poison one weight so the first forward overflows.
        let (_, w) = &model.named_params()[0];
        let mut d = w.to_vec();
        d[0] = 1e308;
        w.set_data(d).unwrap();
        let group = synth_group(4, 2, (32, 32), None).unwrap();
        let cfg = TrainConfig { steps: 1, lr: 1e-3, ..Default::default() };
        let err = train(&[group], &model, &cfg, &LossConfig::default(), "-", None, None, |_, _, _| {})
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 1"), "message: {msg}");
    }

    #[test]
    fn f32_training_runs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_model = {
            let mut c = tiny_model(AssocMode::Sac, 9).cfg;
            c.encoder.input_size = (32, 32);
            c
        };
        let model = Model::new(cfg_model, 9, DType::F32).unwrap();
        let group = synth_group(5, 2, (32, 32), None).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            lr: 1e-3,
            dtype: DTypeConfig::F32,
            ckpt_every: 0,
            ..Default::default()
        };
        train(std::slice::from_ref(&group), &model, &cfg, &LossConfig::default(), "h", None, Some(dir.path()), |_, _, _| {})
            .unwrap();
        let loaded = ckpt::load(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(loaded.dtype, DType::F32);
        // Values survive the f32 payload exactly (they are f32-quantized).
        let (_, p) = &model.named_params()[0];
        assert_eq!(loaded.tensors[&model.named_params()[0].0].1, p.to_vec());
    }
}
