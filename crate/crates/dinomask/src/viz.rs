//! Attention-map export and masking previews.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::views::{make_raw_views, ViewConfig};

/// Binary PGM (P5), one byte per pixel.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::InvalidArgument(format!(
            "write_pgm: {} pixels for {w}x{h}",
            pixels.len()
        )));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Saves a raw `[3, H, W]` float image in `[0, 1]` as PNG.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_png", "[3, H, W]", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (image.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Min-max normalizes to `[0, 255]`; a constant map becomes all 128.
fn to_gray(values: &[f32]) -> Vec<u8> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}

fn upsample_nearest(grid: &[f32], g: usize, scale: usize) -> Vec<f32> {
    let out = g * scale;
    let mut up = vec![0.0f32; out * out];
    for y in 0..out {
        for x in 0..out {
            up[y * out + x] = grid[(y / scale) * g + (x / scale)];
        }
    }
    up
}

/// Writes per-head CLS attention maps plus the head average.
///
/// `attn` is the `[1, H, T, T]` last-block attention of a single image at
/// resolution `img_size`; the CLS row over the patch grid is upsampled
/// nearest-neighbor to `img_size x img_size` and min-max normalized. Files
/// are `<stem>_head<h>.pgm` and `<stem>_mean.pgm` under `out_dir`.
pub fn export_attention(
    attn: &Tensor<f32>,
    img_size: usize,
    patch: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let s = attn.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[2] != s[3] {
        return Err(Error::shape("export_attention", "[1, H, T, T]", format!("{s:?}")));
    }
    let (heads, tokens) = (s[1], s[2]);
    let g = img_size / patch;
    if g * g + 1 != tokens || g * patch != img_size {
        return Err(Error::InvalidArgument(format!(
            "export_attention: {tokens} tokens do not match a {g}x{g} grid at patch {patch}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // CLS row, patch columns only: attn[0, h, 0, 1..].
    let cls_row = |h: usize| -> Vec<f32> {
        let base = (h * tokens) * tokens + 1;
        attn.data()[base..base + g * g].to_vec()
    };
    let mut paths = Vec::with_capacity(heads + 1);
    let mut mean = vec![0.0f32; g * g];
    for h in 0..heads {
        let row = cls_row(h);
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v / heads as f32;
        }
        let up = upsample_nearest(&row, g, patch);
        let path = out_dir.join(format!("{stem}_head{h}.pgm"));
        write_pgm(&path, img_size, img_size, &to_gray(&up))?;
        paths.push(path);
    }
    let up = upsample_nearest(&mean, g, patch);
    let path = out_dir.join(format!("{stem}_mean.pgm"));
    write_pgm(&path, img_size, img_size, &to_gray(&up))?;
    paths.push(path);
    Ok(paths)
}

/// Writes the view-layout panel set for one image: the original, both
/// masked student globals, and the first two (clean) locals.
pub fn mask_preview(
    image: &Tensor<f32>,
    cfg: &ViewConfig,
    sample_seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raw = make_raw_views(image, cfg, sample_seed)?;
    let mut panels: Vec<(String, &Tensor<f32>)> =
        vec![("1_original.png".into(), image)];
    for (i, v) in raw.masked_globals.iter().enumerate() {
        panels.push((format!("{}_global{}_masked.png", i + 2, i), v));
    }
    for (i, v) in raw.locals.iter().take(2).enumerate() {
        panels.push((format!("{}_local{}.png", i + 4, i), v));
    }
    let mut paths = Vec::with_capacity(panels.len());
    for (name, img) in panels {
        let path = out_dir.join(name);
        save_png(&path, img)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 3, 4, 5]);
        assert!(write_pgm(&p, 2, 2, &[1, 2, 3]).is_err());
    }

    #[test]
    fn gray_normalization_and_constant_guard() {
        assert_eq!(to_gray(&[0.5, 0.5, 0.5]), vec![128, 128, 128]);
        let g = to_gray(&[0.0, 0.25, 1.0]);
        assert_eq!(g[0], 0);
        assert_eq!(g[2], 255);
        assert_eq!(g[1], 64);
    }

    #[test]
    fn attention_export_counts_dims_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (heads, g, patch) = (3usize, 4usize, 8usize);
        let tokens = g * g + 1;
        let img_size = g * patch;
        let mut rng = rng_from_seed(1);
        // Random rows normalized to sum 1, as real attention would be.
        let mut data = vec![0.0f32; heads * tokens * tokens];
        for row in data.chunks_mut(tokens) {
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01f32..1.0);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let attn = Tensor::from_vec(data, vec![1, heads, tokens, tokens]).unwrap();
        let paths = export_attention(&attn, img_size, patch, dir.path(), "t").unwrap();
        assert_eq!(paths.len(), heads + 1, "one file per head plus the mean");
        for p in &paths {
            let bytes = fs::read(p).unwrap();
            assert!(bytes.starts_with(format!("P5\n{img_size} {img_size}\n255\n").as_bytes()));
            assert_eq!(
                bytes.len(),
                format!("P5\n{img_size} {img_size}\n255\n").len() + img_size * img_size
            );
        }
        // Same input, same bytes.
        let again = dir.path().join("again");
        let paths2 = export_attention(&attn, img_size, patch, &again, "t").unwrap();
        for (a, b) in paths.iter().zip(&paths2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        // Uniform attention hits the constant-map guard.
        let uniform = Tensor::full(vec![1, 1, tokens, tokens], 1.0 / tokens as f32);
        let up = export_attention(&uniform, img_size, patch, dir.path(), "u").unwrap();
        let bytes = fs::read(&up[0]).unwrap();
        let header = format!("P5\n{img_size} {img_size}\n255\n").len();
        assert!(bytes[header..].iter().all(|&b| b == 128));
    }

    #[test]
    fn preview_panels_and_masked_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(2);
        let data: Vec<f32> = (0..3 * 80 * 80).map(|_| rng.gen_range(0.2f32..1.0)).collect();
        let img = Tensor::from_vec(data, vec![3, 80, 80]).unwrap();
        let cfg = ViewConfig {
            img_size_global: 64,
            img_size_local: 32,
            patch_size: 8,
            num_local_views: 8,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            mask_ratio: 0.1,
            hflip_prob: 0.5,
            color_jitter: false,
        };
        let paths = mask_preview(&img, &cfg, 33, dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        assert!(paths[0].file_name().unwrap().to_str().unwrap().contains("original"));
        // Masked panels carry exactly 6 zero blocks of 8x8 = 384 black
        // pixels (edges of clean crops stay strictly positive here).
        for p in &paths[1..3] {
            let img = crate::data::load_image(p).unwrap();
            let hw = 64 * 64;
            let zeros = (0..hw)
                .filter(|&i| (0..3).all(|c| img.data()[c * hw + i] == 0.0))
                .count();
            assert_eq!(zeros, 6 * 64, "panel {}", p.display());
        }
        let again = mask_preview(&img, &cfg, 33, &dir.path().join("b")).unwrap();
        for (a, b) in paths.iter().zip(&again) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
