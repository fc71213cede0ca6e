//! Command-line surface for the condensed deep association CoSOD library:
//! dataset synthesis, training, evaluation, inference, gradient checking,
//! MAC counting, and correspondence export.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use conda_core::ckpt;
use conda_core::data::{load_dataset, save_group, synth_group_with, GroupSample};
use conda_core::macs;
use conda_core::pipeline::{AssocMode, Model, Variant};
use conda_core::runconfig::RunConfig;
use conda_core::train::{self, DTypeConfig};
use conda_core::verify;
use conda_cli::{corr, viz};

#[derive(Parser)]
#[command(
    name = "conda-cli",
    about = "Condensed deep association learning for co-salient object detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config-file overrides shared by the model-running commands. Flags win
/// over file values; the effective config is what gets hashed and stored.
#[derive(Args, Default)]
struct Overrides {
    /// Override train.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Override pipeline.mode (off|full|sac|cac).
    #[arg(long)]
    mode: Option<String>,
    /// Override pipeline.variant (pag|sag).
    #[arg(long)]
    variant: Option<String>,
    /// Override pipeline.k.
    #[arg(long)]
    k: Option<usize>,
    /// Override train.dtype (f64|f32).
    #[arg(long)]
    dtype: Option<String>,
    /// Override loss.occ weight.
    #[arg(long)]
    occ: Option<f64>,
    /// Override loss.object_aware (false = full-pixel cycle loss).
    #[arg(long)]
    object_aware: Option<bool>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(m) = &self.mode {
            cfg.pipeline.mode = match m.as_str() {
                "off" => AssocMode::Off,
                "full" => AssocMode::Full,
                "sac" => AssocMode::Sac,
                "cac" => AssocMode::Cac,
                other => bail!("unknown mode '{other}' (off|full|sac|cac)"),
            };
        }
        if let Some(v) = &self.variant {
            cfg.pipeline.variant = match v.as_str() {
                "pag" => Variant::Pag,
                "sag" => Variant::Sag,
                other => bail!("unknown variant '{other}' (pag|sag)"),
            };
        }
        if let Some(k) = self.k {
            cfg.pipeline.k = k;
        }
        if let Some(d) = &self.dtype {
            cfg.train.dtype = match d.as_str() {
                "f64" => DTypeConfig::F64,
                "f32" => DTypeConfig::F32,
                other => bail!("unknown dtype '{other}' (f64|f32)"),
            };
        }
        if let Some(w) = self.occ {
            cfg.loss.occ = w;
        }
        if let Some(oa) = self.object_aware {
            cfg.loss.object_aware = oa;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic co-salient group directories.
    Synth {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Number of groups.
        #[arg(long, default_value_t = 4)]
        groups: usize,
        /// Images per group.
        #[arg(long, default_value_t = 6)]
        n: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Base RNG seed; group g uses seed + g.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum distractor shapes per image.
        #[arg(long, default_value_t = 2)]
        max_distractors: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, logs, and the effective config.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset; prints per-image CSV plus a
    /// summary row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config file; defaults to the one embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference and write grayscale saliency maps (plus optional
    /// correspondence exports).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file; defaults to the one embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Export per-stage correspondence fields and overlay images.
        #[arg(long, default_value_t = false)]
        dump_corr: bool,
    },
    /// Closed-form multiply-accumulate counts for a config and geometry.
    Macs {
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Group size.
        #[arg(long, default_value_t = 6)]
        n: usize,
        /// Square input size.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Gradient-check every op and the end-to-end toy loss.
    Gradcheck {
        /// Config file (must run in f64 mode); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Synth { out, groups, n, size, seed, max_distractors } => {
            cmd_synth(&out, groups, n, size, seed, max_distractors)
        }
        Cmd::Train { config, data, out, overrides } => cmd_train(&config, &data, &out, &overrides),
        Cmd::Eval { ckpt, data, config, out } => {
            cmd_eval(&ckpt, &data, config.as_deref(), out.as_deref())
        }
        Cmd::Infer { ckpt, data, out, config, dump_corr } => {
            cmd_infer(&ckpt, &data, &out, config.as_deref(), dump_corr)
        }
        Cmd::Macs { config, n, size } => cmd_macs(config.as_deref(), n, size),
        Cmd::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), seed),
    }
}

fn cmd_synth(
    out: &Path,
    groups: usize,
    n: usize,
    size: usize,
    seed: u64,
    max_distractors: usize,
) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    for g in 0..groups {
        let group = synth_group_with(seed + g as u64, n, (size, size), None, max_distractors)?;
        let dir = save_group(&group, out)?;
        println!("group,{},{}", group.name, dir.display());
    }
    println!("written,{groups} groups x {n} images,{}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, overrides: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg)?;
    let hash = cfg.hash();
    let canonical = cfg.canonical_toml();
    let groups = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), &canonical)?;

    let model = Model::new(cfg.model_config(), cfg.train.seed, cfg.train.dtype.to_dtype())?;
    let stages = cfg.pipeline.sorted_stages();
    println!("{}", conda_core::loss::LossReport::csv_header(&stages));
    let reports = train::train(
        &groups,
        &model,
        &cfg.train,
        &cfg.loss,
        &hash,
        Some(&canonical),
        Some(out),
        |step, report, eval_summary| {
            println!("{}", report.csv_line(step));
            if let Some(m) = eval_summary {
                println!(
                    "eval,{step},s={:.4},e={:.4},f={:.4},mae={:.4}",
                    m.s_measure, m.e_max, m.f_max, m.mae
                );
            }
        },
    )?;
    eprintln!(
        "trained {} steps on {} groups; final loss {:.6}; checkpoint {}",
        reports.len(),
        groups.len(),
        reports.last().map(|r| r.total).unwrap_or(f64::NAN),
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Rebuild the model a checkpoint was trained with, preferring an explicit
/// config file over the embedded one.
fn model_from_checkpoint(ckpt_path: &Path, config: Option<&Path>) -> Result<(Model, RunConfig)> {
    let container = ckpt::load(ckpt_path)?;
    let cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            if cfg.hash() != container.config_hash {
                eprintln!(
                    "warning: config hash {} differs from checkpoint hash {}",
                    cfg.hash(),
                    container.config_hash
                );
            }
            cfg
        }
        None => {
            let text = container.config_text.as_deref().with_context(|| {
                "checkpoint carries no embedded config; pass --config".to_string()
            })?;
            RunConfig::parse(text)?
        }
    };
    let model = Model::new(cfg.model_config(), cfg.train.seed, cfg.train.dtype.to_dtype())?;
    ckpt::load_into_model(ckpt_path, &model)?;
    Ok((model, cfg))
}

fn cmd_eval(ckpt_path: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (model, _) = model_from_checkpoint(ckpt_path, config)?;
    let groups = load_dataset(data)?;
    let dataset_name = data
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| data.display().to_string());
    let (per_group, summary) = train::evaluate(&model, &groups)?;

    let mut csv = String::from("dataset,group,image,s,e,f,mae\n");
    for (gname, reports) in &per_group {
        let group = groups.iter().find(|g| &g.name == gname).unwrap();
        for (i, r) in reports.iter().enumerate() {
            csv.push_str(&format!(
                "{dataset_name},{gname},{},{:.6},{:.6},{:.6},{:.6}\n",
                group.stems[i], r.s_measure, r.e_max, r.f_max, r.mae
            ));
        }
    }
    csv.push_str(&format!(
        "{dataset_name},mean,all,{:.6},{:.6},{:.6},{:.6}\n",
        summary.s_measure, summary.e_max, summary.f_max, summary.mae
    ));
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}

fn save_prob_png(path: &Path, prob: &[f64], h: usize, w: usize) -> Result<()> {
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (prob[y * w + x] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn cmd_infer(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    dump_corr: bool,
) -> Result<()> {
    let (model, cfg) = model_from_checkpoint(ckpt_path, config)?;
    if dump_corr && !matches!(cfg.pipeline.mode, AssocMode::Sac | AssocMode::Cac) {
        bail!("--dump-corr needs a condensation mode (sac or cac)");
    }
    let groups = load_dataset(data)?;
    let mut written = 0usize;
    for group in &groups {
        let gdir = out.join(&group.name);
        std::fs::create_dir_all(&gdir)?;
        let (gh, gw) = group.size();
        let (mh, mw) = model.cfg.encoder.input_size;
        let sample = group.with_dtype(model.dtype)?;
        let input = if (gh, gw) == (mh, mw) {
            sample.images.clone()
        } else {
            sample.resized_images(mh, mw)?
        };
        let fwd = model.forward(&input)?;
        let prob = if (gh, gw) == (mh, mw) {
            fwd.prob.clone()
        } else {
            fwd.prob.bilinear_resize(gh, gw)?
        };
        let pv = prob.to_vec();
        let per = gh * gw;
        for (i, stem) in group.stems.iter().enumerate() {
            save_prob_png(&gdir.join(format!("{stem}.png")), &pv[i * per..(i + 1) * per], gh, gw)?;
            written += 1;
        }
        if dump_corr {
            dump_correspondences(&gdir, &model, group, &fwd, &pv)?;
        }
    }
    println!("written,{written} saliency maps,{}", out.display());
    Ok(())
}

fn dump_correspondences(
    gdir: &Path,
    model: &Model,
    group: &GroupSample,
    fwd: &conda_core::pipeline::ForwardOutput,
    prob_full: &[f64],
) -> Result<()> {
    let n = group.group_size();
    let (gh, gw) = group.size();
    for (&s, field) in &fwd.fields {
        let (h, w) = model.cfg.encoder.stage_size(s);
        corr::write_corr(
            &gdir.join(format!("corr_stage{s}.bin")),
            s,
            n,
            h,
            w,
            &field.refined.to_vec(),
        )?;
    }
    // Overlay for the finest exported stage: main image vs related images.
    let Some((&s, field)) = fwd.fields.iter().next() else {
        return Ok(());
    };
    let (h, w) = model.cfg.encoder.stage_size(s);
    let (fy, fx) = (gh as f64 / h as f64, gw as f64 / w as f64);
    let refined = field.refined.to_vec();
    let imgs = group.images.to_vec();
    let img_len = gh * gw * 3;

    // Sample up to eight predicted co-salient stage pixels of image 0.
    let mut candidates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let full_y = (((y as f64 + 0.5) * fy - 0.5).round() as isize).clamp(0, gh as isize - 1);
            let full_x = (((x as f64 + 0.5) * fx - 0.5).round() as isize).clamp(0, gw as isize - 1);
            if prob_full[full_y as usize * gw + full_x as usize] >= 0.5 {
                candidates.push((y, x));
            }
        }
    }
    let stride = (candidates.len() / 8).max(1);
    let sampled: Vec<(usize, usize)> = candidates.into_iter().step_by(stride).take(8).collect();

    for j in 1..n.min(4) {
        let mut points = Vec::new();
        for &(y, x) in &sampled {
            let off = (((y * w + x) * n) + j) * 2;
            let ty = refined[off];
            let tx = refined[off + 1];
            points.push((
                ((y as f64 + 0.5) * fy - 0.5, (x as f64 + 0.5) * fx - 0.5),
                ((ty + 0.5) * fy - 0.5, (tx + 0.5) * fx - 0.5),
            ));
        }
        let overlay = viz::correspondence_overlay(
            &imgs[..img_len],
            &imgs[j * img_len..(j + 1) * img_len],
            gh,
            gw,
            &points,
        );
        overlay.save(gdir.join(format!("corr_overlay_0to{j}.png")))?;
    }
    Ok(())
}

fn cmd_macs(config: Option<&Path>, n: usize, size: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let report = macs::count(&cfg.model_config(), n, (size, size));
    println!("geometry,N={n},input={size}x{size},K={}", cfg.pipeline.k);
    println!("module,macs");
    println!("encoder,{}", report.encoder);
    for st in &report.per_stage {
        println!("stage{} hac,{}", st.stage, st.hac);
        println!("stage{} assoc memory bytes,{}", st.stage, st.assoc_memory_bytes);
        println!("stage{} agg full,{}", st.stage, st.agg_full);
        println!("stage{} agg condensed single pass,{}", st.stage, st.agg_condensed_single);
        println!(
            "stage{} agg condensed two-pass (K={}),{}",
            st.stage, st.k, st.agg_condensed_two_pass
        );
    }
    println!("decoder,{}", report.decoder);
    println!("total agg full,{}", report.agg_full_total);
    println!("total agg condensed,{}", report.agg_condensed_total);
    println!("condensed/full ratio,{:.4}", report.ratio);
    if n == 6 && size == 256 {
        println!(
            "# reference totals for the original VGG-16 configuration at this geometry: \
             full-pixel 91.38 G, condensed 77.19 G (different channel plan; direction only)"
        );
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cfg.train.dtype != DTypeConfig::F64 {
        bail!("gradcheck requires float64 mode (train.dtype = \"f64\")");
    }
    const TOL: f64 = 1e-3;
    let mut failed = false;
    for result in verify::run_op_suite(seed)? {
        let ok = result.max_rel_error < TOL;
        failed |= !ok;
        println!(
            "op {},max_rel_err,{:.3e},{}",
            result.name,
            result.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let e2e = verify::end_to_end_gradcheck(seed, 1e-5)?;
    let ok = e2e < TOL;
    failed |= !ok;
    println!(
        "end_to_end_loss,max_rel_err,{:.3e},{}",
        e2e,
        if ok { "PASS" } else { "FAIL" }
    );
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}
