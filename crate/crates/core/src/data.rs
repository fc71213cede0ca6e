//! Synthetic co-salient groups and on-disk dataset I/O.
//!
//! A synthetic group shares one shape class (the co-salient object) drawn
//! with per-image position, scale, rotation, and hue on a textured gradient
//! background, plus up to two distractor shapes of other classes. Masks mark
//! the common-class instance only, so group context, not single-image
//! saliency, identifies the target.
//!
//! On disk a dataset is `root/<group>/images/*.png` and
//! `root/<group>/masks/*.png`, paired by file stem, 8-bit PNG.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MIN_SIZE: usize = 16;
pub const SHAPE_CLASSES: usize = 4;

/// One group of related images with their co-saliency masks.
#[derive(Clone, Debug)]
pub struct GroupSample {
    pub name: String,
    /// Per-image file stems, parallel to the first tensor dim.
    pub stems: Vec<String>,
    /// `[N, H, W, 3]` in `[0,1]`.
    pub images: Tensor,
    /// `[N, H, W, 1]` binary.
    pub masks: Tensor,
    pub category: usize,
}

impl GroupSample {
    pub fn group_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Bilinear-resized copies of the images (constant tensors).
    pub fn resized_images(&self, h: usize, w: usize) -> Result<Tensor> {
        self.images.bilinear_resize(h, w)
    }

    /// Nearest-neighbor-resized masks; stays binary.
    pub fn resized_masks(&self, h: usize, w: usize) -> Result<Tensor> {
        let (n, sh, sw) = (
            self.masks.shape()[0],
            self.masks.shape()[1],
            self.masks.shape()[2],
        );
        let src = self.masks.data();
        let out = resize_nearest(&src, n, sh, sw, h, w);
        drop(src);
        Tensor::from_vec_dtype(vec![n, h, w, 1], out, self.masks.dtype())
    }

    /// Re-quantize to the dtype used by the model graph.
    pub fn with_dtype(&self, dtype: DType) -> Result<GroupSample> {
        Ok(GroupSample {
            name: self.name.clone(),
            stems: self.stems.clone(),
            images: Tensor::from_vec_dtype(self.images.shape().to_vec(), self.images.to_vec(), dtype)?,
            masks: Tensor::from_vec_dtype(self.masks.shape().to_vec(), self.masks.to_vec(), dtype)?,
            category: self.category,
        })
    }
}

/// Nearest-neighbor resize of `[N,H,W,1]` raw data.
pub fn resize_nearest(src: &[f64], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * oh * ow];
    for i in 0..n {
        for y in 0..oh {
            let sy = (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
            for x in 0..ow {
                let sx = (((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
                out[(i * oh + y) * ow + x] = src[(i * h + sy) * w + sx];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeClass {
    Ring,
    Cross,
    Triangle,
    Diamond,
}

impl ShapeClass {
    fn from_index(i: usize) -> ShapeClass {
        match i % SHAPE_CLASSES {
            0 => ShapeClass::Ring,
            1 => ShapeClass::Cross,
            2 => ShapeClass::Triangle,
            _ => ShapeClass::Diamond,
        }
    }

    /// Membership test in local (rotated, centered) coordinates with
    /// half-extent `r`.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            ShapeClass::Ring => {
                let d = (u * u + v * v).sqrt();
                d <= r && d >= 0.55 * r
            }
            ShapeClass::Cross => {
                let bar = 0.3 * r;
                (u.abs() <= bar && v.abs() <= r) || (v.abs() <= bar && u.abs() <= r)
            }
            ShapeClass::Triangle => {
                // Equilateral triangle with circumradius r, apex up.
                let y = -v; // local y grows upward
                let h = 1.5 * r;
                let base = -0.5 * r;
                if y < base || y > base + h {
                    return false;
                }
                let half_width = (r * 0.866_025_403_784_438_6) * (1.0 - (y - base) / h);
                u.abs() <= half_width
            }
            ShapeClass::Diamond => u.abs() + v.abs() <= r,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct ShapeDraw {
    class: ShapeClass,
    cy: f64,
    cx: f64,
    r: f64,
    rot: f64,
    color: [f64; 3],
}

impl ShapeDraw {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let (s, c) = self.rot.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.class.contains(u, v, self.r)
    }
}

fn random_shape(
    rng: &mut ChaCha8Rng,
    class: ShapeClass,
    h: usize,
    w: usize,
    hue: Option<f64>,
) -> ShapeDraw {
    let min_dim = h.min(w) as f64;
    let r = rng.gen_range(0.16..0.26) * min_dim;
    let cy = rng.gen_range(r + 1.0..h as f64 - r - 1.0);
    let cx = rng.gen_range(r + 1.0..w as f64 - r - 1.0);
    let rot = rng.gen_range(0.0..2.0 * PI);
    // Distractors draw from the same saturated palette as the common shape,
    // so within one image nothing singles out the target class; the common
    // instance keeps a per-group hue (real co-salient objects share
    // appearance), which is what makes cross-image matching informative.
    let hue = hue.unwrap_or_else(|| rng.gen_range(0.0..1.0));
    let color = hsv_to_rgb(hue, rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0));
    ShapeDraw { class, cy, cx, r, rot, color }
}

pub(crate) struct RenderedGroup {
    pub images: Vec<f64>,
    pub masks: Vec<f64>,
    /// All shape-covered pixels (common and distractors); consumed by the
    /// consistency checks.
    #[cfg_attr(not(test), allow(dead_code))]
    pub painted: Vec<bool>,
    pub category: usize,
}

pub(crate) fn render_group(
    seed: u64,
    n: usize,
    h: usize,
    w: usize,
    category: Option<usize>,
    max_distractors: usize,
) -> Result<RenderedGroup> {
    if n < 2 {
        return Err(Error::invalid("a group needs at least 2 images"));
    }
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::invalid(format!(
            "size {h}x{w} is too small for the shape generator (min {MIN_SIZE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let category = category.unwrap_or_else(|| rng.gen_range(0..SHAPE_CLASSES));
    let common = ShapeClass::from_index(category);
    let group_hue: f64 = rng.gen_range(0.0..1.0);

    let mut images = vec![0.0f64; n * h * w * 3];
    let mut masks = vec![0.0f64; n * h * w];
    let mut painted = vec![false; n * h * w];

    for i in 0..n {
        // Muted gradient background with mild noise.
        let c0 = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.3), rng.gen_range(0.25..0.7));
        let c1 = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.3), rng.gen_range(0.25..0.7));
        let theta: f64 = rng.gen_range(0.0..2.0 * PI);
        let (dy, dx) = theta.sin_cos();
        let diag = ((h * h + w * w) as f64).sqrt();

        let n_distract = if max_distractors == 0 {
            0
        } else {
            rng.gen_range(1..=max_distractors)
        };
        let mut draws: Vec<ShapeDraw> = (0..n_distract)
            .map(|_| {
                let mut cls = ShapeClass::from_index(rng.gen_range(0..SHAPE_CLASSES));
                while cls == common {
                    cls = ShapeClass::from_index(rng.gen_range(0..SHAPE_CLASSES));
                }
                random_shape(&mut rng, cls, h, w, None)
            })
            .collect();
        // Common shape drawn last so the mask matches what is visible.
        let hue = group_hue + rng.gen_range(-0.04..0.04);
        draws.push(random_shape(&mut rng, common, h, w, Some(hue)));

        for y in 0..h {
            for x in 0..w {
                let t = ((y as f64 * dy + x as f64 * dx) / diag + 1.0) / 2.0;
                let mut px = [
                    c0[0] + (c1[0] - c0[0]) * t,
                    c0[1] + (c1[1] - c0[1]) * t,
                    c0[2] + (c1[2] - c0[2]) * t,
                ];
                let mut on_common = false;
                let mut on_any = false;
                for (di, d) in draws.iter().enumerate() {
                    if d.covers(y, x) {
                        px = d.color;
                        on_any = true;
                        on_common = di == draws.len() - 1;
                    }
                }
                let p = (i * h + y) * w + x;
                for ch in 0..3 {
                    let noise = rng.gen_range(-0.03..0.03);
                    images[p * 3 + ch] = (px[ch] + noise).clamp(0.0, 1.0);
                }
                masks[p] = if on_common { 1.0 } else { 0.0 };
                painted[p] = on_any;
            }
        }
        // Margins keep the whole shape inside the frame, so the mask cannot
        // be empty; assert the render bookkeeping agrees.
        debug_assert!(masks[i * h * w..(i + 1) * h * w].contains(&1.0));
    }
    Ok(RenderedGroup { images, masks, painted, category })
}

/// Deterministically generate one synthetic group.
pub fn synth_group(
    seed: u64,
    n: usize,
    size: (usize, usize),
    category: Option<usize>,
) -> Result<GroupSample> {
    synth_group_with(seed, n, size, category, 2)
}

/// Variant with a configurable distractor cap (0 disables distractors).
pub fn synth_group_with(
    seed: u64,
    n: usize,
    size: (usize, usize),
    category: Option<usize>,
    max_distractors: usize,
) -> Result<GroupSample> {
    let (h, w) = size;
    let r = render_group(seed, n, h, w, category, max_distractors)?;
    Ok(GroupSample {
        name: format!("synth{seed:05}"),
        stems: (0..n).map(|i| format!("{i:03}")).collect(),
        images: Tensor::from_vec(vec![n, h, w, 3], r.images)?,
        masks: Tensor::from_vec(vec![n, h, w, 1], r.masks)?,
        category: r.category,
    })
}

/// Write a group under `root/<group name>/` in the dataset layout.
pub fn save_group(group: &GroupSample, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&group.name);
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    let (n, (h, w)) = (group.group_size(), group.size());
    let imgs = group.images.data();
    let msks = group.masks.data();
    for i in 0..n {
        let mut rgb = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let p = ((i * h + y) * w + x) * 3;
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (imgs[p] * 255.0).round() as u8,
                        (imgs[p + 1] * 255.0).round() as u8,
                        (imgs[p + 2] * 255.0).round() as u8,
                    ]),
                );
            }
        }
        rgb.save(img_dir.join(format!("{}.png", group.stems[i])))?;

        let mut gray = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let m = msks[(i * h + y) * w + x];
                gray.put_pixel(x as u32, y as u32, image::Luma([if m >= 0.5 { 255 } else { 0 }]));
            }
        }
        gray.save(mask_dir.join(format!("{}.png", group.stems[i])))?;
    }
    Ok(dir)
}

/// Load one group directory (`images/` + `masks/`, paired by stem).
pub fn load_group(dir: &Path) -> Result<GroupSample> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "group".to_string());
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    let mut stems: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&img_dir).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", img_dir.display()))
    })? {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            stems.push(path.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("group {} has no images", dir.display())));
    }

    let mut images: Vec<f64> = Vec::new();
    let mut masks: Vec<f64> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for stem in &stems {
        let ipath = img_dir.join(format!("{stem}.png"));
        let mpath = mask_dir.join(format!("{stem}.png"));
        if !mpath.exists() {
            return Err(Error::Data(format!(
                "image '{stem}' in group {name} has no matching mask"
            )));
        }
        let img = ImageReader::open(&ipath)?.decode()?.to_rgb8();
        let msk = ImageReader::open(&mpath)?.decode()?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if msk.width() as usize != w || msk.height() as usize != h {
            return Err(Error::Data(format!(
                "image '{stem}' in group {name}: mask size differs from image"
            )));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Data(format!(
                    "group {name}: image '{stem}' size differs from the rest of the group"
                )));
            }
            _ => {}
        }
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32).0;
                images.extend(p.iter().map(|&v| v as f64 / 255.0));
                let m = msk.get_pixel(x as u32, y as u32).0[0];
                masks.push(if m > 127 { 1.0 } else { 0.0 });
            }
        }
    }
    let (h, w) = dims.unwrap();
    let n = stems.len();
    Ok(GroupSample {
        name,
        stems,
        images: Tensor::from_vec(vec![n, h, w, 3], images)?,
        masks: Tensor::from_vec(vec![n, h, w, 1], masks)?,
        category: 0,
    })
}

/// Load every group directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<GroupSample>> {
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
    {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no group directories under {}", root.display())));
    }
    dirs.iter().map(|d| load_group(d)).collect()
}
