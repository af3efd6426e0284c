//! Multi-crop view construction with asymmetric random masking.
//!
//! Every image yields 2 global crops and N local crops. Each global crop is
//! copied into a clean teacher view and a student view whose patch cells are
//! randomly zeroed (k = floor(r * P) cells, uniform without replacement).
//! Locals are never masked. Masking happens in raw pixel space before
//! per-channel normalization, so masked pixels are exactly zero.
//!
//! Randomness is derived per (sample, view, purpose): the crop stream and
//! the mask stream are independent, so runs with different mask ratios see
//! identical crop geometry.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng;

/// Per-channel normalization constants (ImageNet convention).
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// View-pipeline settings; see `RunConfig` for the corresponding keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub img_size_global: usize,
    pub img_size_local: usize,
    pub patch_size: usize,
    pub num_local_views: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub mask_ratio: f64,
    pub hflip_prob: f64,
    pub color_jitter: bool,
}

/// Number of patch cells to mask: `k = floor(r * P)`.
pub fn mask_count(p: usize, ratio: f64) -> usize {
    ((ratio * p as f64).floor() as usize).min(p)
}

/// Which patch cells of one global view are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    pub ratio: f64,
    /// Sorted, distinct cell indices in `[0, rows*cols)`.
    pub indices: Vec<usize>,
}

impl MaskPlan {
    pub fn total_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn masked_patches(&self) -> usize {
        self.indices.len()
    }
}

/// `k` distinct indices in `[0, p)`, uniform over all k-subsets
/// (partial Fisher-Yates), returned sorted.
pub fn sample_mask_indices(p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > p {
        return Err(Error::InvalidArgument(format!(
            "sample_mask_indices: k={k} exceeds patch count {p}"
        )));
    }
    let mut pool: Vec<usize> = (0..p).collect();
    for i in 0..k {
        let j = rng.gen_range(i..p);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Expands a mask plan to a `[H, W]` binary tensor: masked cells become
/// constant 0 blocks of `p x p` pixels, everything else 1.
pub fn build_pixel_mask(plan: &MaskPlan, h: usize, w: usize, patch: usize) -> Result<Tensor<f32>> {
    let (gh, gw) = plan.grid;
    if h != gh * patch || w != gw * patch {
        return Err(Error::InvalidArgument(format!(
            "build_pixel_mask: {h}x{w} incompatible with grid {gh}x{gw} at patch {patch}"
        )));
    }
    let mut cell = vec![1.0f32; gh * gw];
    for &i in &plan.indices {
        if i >= cell.len() {
            return Err(Error::InvalidArgument(format!(
                "build_pixel_mask: index {i} outside grid of {} cells",
                cell.len()
            )));
        }
        cell[i] = 0.0;
    }
    let mut mask = vec![1.0f32; h * w];
    for y in 0..h {
        let gy = y / patch;
        for x in 0..w {
            mask[y * w + x] = cell[gy * gw + x / patch];
        }
    }
    Tensor::from_vec(mask, vec![h, w])
}

/// Element-wise multiply, mask broadcast over channels.
pub fn apply_mask(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || mask.shape() != &s[1..] {
        return Err(Error::shape(
            "apply_mask",
            format!("[C,H,W] image with [H,W] mask"),
            format!("image {:?}, mask {:?}", s, mask.shape()),
        ));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = image.data().to_vec();
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] *= mask.data()[i];
        }
    }
    Tensor::from_vec(out, s.to_vec())
}

fn bilinear_axis(f: f64, limit: usize) -> (usize, usize, f64) {
    let f = f.clamp(0.0, (limit - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(limit - 1);
    (i0, i1, f - i0 as f64)
}

/// Crops `[C, ch, cw]` at `(top, left)` and bilinearly resizes to
/// `oh x ow` (half-pixel centers, edges clamped).
pub fn crop_resize_hw(
    image: &Tensor<f32>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("crop_resize", "[C,H,W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w || oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop_resize: region {top},{left} {ch}x{cw} outside {h}x{w} (out {oh}x{ow})"
        )));
    }
    let ry = ch as f64 / oh as f64;
    let rx = cw as f64 / ow as f64;
    let src = image.data();
    let mut data = vec![0.0f32; c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, wy) = bilinear_axis((oy as f64 + 0.5) * ry - 0.5, ch);
        for ox in 0..ow {
            let (x0, x1, wx) = bilinear_axis((ox as f64 + 0.5) * rx - 0.5, cw);
            for cc in 0..c {
                let at = |y: usize, x: usize| src[(cc * h + top + y) * w + left + x] as f64;
                let v = at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + at(y0, x1) * (1.0 - wy) * wx
                    + at(y1, x0) * wy * (1.0 - wx)
                    + at(y1, x1) * wy * wx;
                data[(cc * oh + oy) * ow + ox] = v as f32;
            }
        }
    }
    Tensor::from_vec(data, vec![c, oh, ow])
}

/// Square-output convenience wrapper around `crop_resize_hw`.
pub fn crop_resize(
    image: &Tensor<f32>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out: usize,
) -> Result<Tensor<f32>> {
    crop_resize_hw(image, top, left, ch, cw, out, out)
}

/// Bilinear resize of the full image to `out x out`.
pub fn resize_bilinear(image: &Tensor<f32>, out: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    crop_resize(image, 0, 0, s[1], s[2], out)
}

/// Deterministic evaluation view: shorter side resized to `size` keeping
/// aspect, then a center crop. No masking, no augmentation; raw pixels.
pub fn eval_view(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("eval_view", "[C,H,W]", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("eval_view: empty image".into()));
    }
    let scale = size as f64 / h.min(w) as f64;
    let oh = ((h as f64 * scale).round() as usize).max(size);
    let ow = ((w as f64 * scale).round() as usize).max(size);
    let resized = crop_resize_hw(image, 0, 0, h, w, oh, ow)?;
    crop_resize_hw(&resized, (oh - size) / 2, (ow - size) / 2, size, size, size, size)
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(cc * h + y) * w + x] = src[(cc * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new_unchecked(out, s)
}

/// Area/aspect-jittered crop resized to `out_size`: up to 10 attempts at a
/// region with area fraction uniform in `scale` and aspect in [3/4, 4/3],
/// then a clamped center crop as fallback.
pub fn random_resized_crop(
    image: &Tensor<f32>,
    scale: (f64, f64),
    out_size: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("random_resized_crop", "[C,H,W]", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "random_resized_crop: scale range ({}, {}) must satisfy 0 < min <= max <= 1",
            scale.0, scale.1
        )));
    }
    let area = (h * w) as f64;
    let (log_rmin, log_rmax) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(log_rmin..=log_rmax).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return crop_resize(image, top, left, ch, cw, out_size);
        }
    }
    // Fallback: largest legal-aspect center crop.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < 3.0 / 4.0 {
        (((w as f64) / (3.0 / 4.0)).round().min(h as f64) as usize, w)
    } else if in_ratio > 4.0 / 3.0 {
        (h, ((h as f64) * (4.0 / 3.0)).round().min(w as f64) as usize)
    } else {
        (h, w)
    };
    crop_resize(image, (h - ch) / 2, (w - cw) / 2, ch, cw, out_size)
}

fn color_jitter(image: &mut Tensor<f32>, rng: &mut impl Rng) {
    let brightness = rng.gen_range(0.6f32..1.4);
    let contrast = rng.gen_range(0.6f32..1.4);
    let n = image.numel() as f32;
    let mean: f32 = image.data().iter().sum::<f32>() / n;
    for v in image.data_mut() {
        *v = ((mean + (*v - mean) * contrast) * brightness).clamp(0.0, 1.0);
    }
}

/// Normalizes `[3, H, W]` raw pixels in place with fixed mean/std.
pub fn normalize_image(image: &mut Tensor<f32>) {
    let s = image.shape().to_vec();
    let hw = s[1] * s[2];
    let data = image.data_mut();
    for c in 0..3 {
        let (m, sd) = (NORM_MEAN[c], NORM_STD[c]);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = (*v - m) / sd;
        }
    }
}

/// Views of one sample before normalization.
#[derive(Debug, Clone)]
pub struct RawViews {
    /// 2 clean global crops (teacher input).
    pub globals: Vec<Tensor<f32>>,
    /// The same 2 crops with the mask applied (student input).
    pub masked_globals: Vec<Tensor<f32>>,
    /// N clean local crops (student input).
    pub locals: Vec<Tensor<f32>>,
    /// Mask plans of the 2 globals.
    pub plans: Vec<MaskPlan>,
}

/// Normalized views of one sample, ready for the model.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub teacher_globals: Vec<Tensor<f32>>,
    pub student_globals: Vec<Tensor<f32>>,
    pub student_locals: Vec<Tensor<f32>>,
    pub plans: Vec<MaskPlan>,
}

/// Crops and masks in raw pixel space. Per-view RNG streams are derived
/// from `sample_seed`; globals use view indices 0..2, locals 2..2+N.
pub fn make_raw_views(
    image: &Tensor<f32>,
    cfg: &ViewConfig,
    sample_seed: u64,
) -> Result<RawViews> {
    let g = cfg.img_size_global / cfg.patch_size;
    let total = g * g;
    let k = mask_count(total, cfg.mask_ratio);
    let mut globals = Vec::with_capacity(2);
    let mut masked_globals = Vec::with_capacity(2);
    let mut plans = Vec::with_capacity(2);
    for v in 0..2u64 {
        let mut crop_rng = rng_from_seed(derive_seed(sample_seed, "crop", v));
        let mut crop =
            random_resized_crop(image, cfg.global_scale, cfg.img_size_global, &mut crop_rng)?;
        if crop_rng.gen_range(0.0..1.0) < cfg.hflip_prob {
            crop = hflip(&crop);
        }
        if cfg.color_jitter {
            let mut jitter_rng = rng_from_seed(derive_seed(sample_seed, "jitter", v));
            color_jitter(&mut crop, &mut jitter_rng);
        }
        let mut mask_rng = rng_from_seed(derive_seed(sample_seed, "mask", v));
        let indices = sample_mask_indices(total, k, &mut mask_rng)?;
        let plan = MaskPlan {
            grid: (g, g),
            ratio: cfg.mask_ratio,
            indices,
        };
        let mask = build_pixel_mask(&plan, cfg.img_size_global, cfg.img_size_global, cfg.patch_size)?;
        masked_globals.push(apply_mask(&crop, &mask)?);
        globals.push(crop);
        plans.push(plan);
    }
    let mut locals = Vec::with_capacity(cfg.num_local_views);
    for v in 0..cfg.num_local_views as u64 {
        let mut crop_rng = rng_from_seed(derive_seed(sample_seed, "crop", 2 + v));
        let mut crop =
            random_resized_crop(image, cfg.local_scale, cfg.img_size_local, &mut crop_rng)?;
        if crop_rng.gen_range(0.0..1.0) < cfg.hflip_prob {
            crop = hflip(&crop);
        }
        if cfg.color_jitter {
            let mut jitter_rng = rng_from_seed(derive_seed(sample_seed, "jitter", 2 + v));
            color_jitter(&mut crop, &mut jitter_rng);
        }
        locals.push(crop);
    }
    Ok(RawViews {
        globals,
        masked_globals,
        locals,
        plans,
    })
}

/// Full pipeline: raw views, then per-channel normalization of every view.
pub fn make_views(image: &Tensor<f32>, cfg: &ViewConfig, sample_seed: u64) -> Result<ViewSet> {
    let raw = make_raw_views(image, cfg, sample_seed)?;
    let norm = |mut t: Tensor<f32>| {
        normalize_image(&mut t);
        t
    };
    Ok(ViewSet {
        teacher_globals: raw.globals.into_iter().map(norm).collect(),
        student_globals: raw.masked_globals.into_iter().map(norm).collect(),
        student_locals: raw.locals.into_iter().map(norm).collect(),
        plans: raw.plans,
    })
}
