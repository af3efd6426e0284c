//! Dataset ingestion and the synthetic pattern generator.
//!
//! Layout: `<root>/<class_name>/<image>.{png,ppm}` with class ids assigned
//! by lexicographic class-name order. An optional `split.tsv`
//! (`path<TAB>train|test`) assigns samples to splits; unlisted samples
//! default to train.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Deterministic listing of a dataset tree.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Lexicographically ordered class names; index = class id.
    pub classes: Vec<String>,
    /// (relative path, class id, split), ordered by path.
    pub samples: Vec<(PathBuf, usize, Split)>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, (_, _, s))| *s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Manifest plus decoded images, aligned by sample index.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// `[3, H, W]` float images in `[0, 1]`.
    pub images: Vec<Tensor<f32>>,
}

impl LoadedDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|(_, c, _)| *c).collect()
    }

    /// Images and labels restricted to one split.
    pub fn split(&self, split: Split) -> (Vec<Tensor<f32>>, Vec<usize>) {
        let idx = self.manifest.indices(split);
        (
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.manifest.samples[i].1).collect(),
        )
    }
}

/// Decodes one PNG or PPM file to `[3, H, W]` floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                data[(c * h + y) * w + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(data, vec![3, h, w])
}

fn read_split_file(path: &Path) -> Result<HashMap<PathBuf, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, s) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: expected path<TAB>split", path.display(), ln + 1))
        })?;
        let split = match s.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Dataset(format!(
                    "{}:{}: unknown split {other:?}",
                    path.display(),
                    ln + 1
                )))
            }
        };
        map.insert(PathBuf::from(p.trim()), split);
    }
    Ok(map)
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm"
    )
}

/// Walks a class-per-directory tree and decodes every image. Unreadable
/// files are skipped with a warning; an empty result is an error. When
/// `split_file` is None, `<root>/split.tsv` is used if present, otherwise
/// everything lands in the train split.
pub fn load_dataset(root: &Path, split_file: Option<&Path>) -> Result<LoadedDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let split_map = match split_file {
        Some(p) => Some(read_split_file(p)?),
        None => {
            let default = root.join("split.tsv");
            if default.is_file() {
                Some(read_split_file(&default)?)
            } else {
                None
            }
        }
    };

    let mut classes: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (class_id, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file() && is_supported(&e.path()))
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .collect();
        files.sort();
        for file in files {
            let rel = PathBuf::from(class).join(&file);
            match load_image(&root.join(&rel)) {
                Ok(img) => {
                    let split = split_map
                        .as_ref()
                        .and_then(|m| m.get(&rel).copied())
                        .unwrap_or(Split::Train);
                    samples.push((rel, class_id, split));
                    images.push(img);
                }
                Err(e) => log::warn!("skipping {}: {e}", rel.display()),
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images under {}",
            root.display()
        )));
    }
    Ok(LoadedDataset {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            classes,
            samples,
        },
        images,
    })
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_pattern(class: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    // Class identity = pattern family + hue; position/scale/noise jitter
    // keeps samples within a class distinct.
    let fg = hsv_to_rgb(class as f32 * 0.618_034, 0.85, 0.9);
    let bg_v = rng.gen_range(0.06f32..0.16);
    let bg = [bg_v, bg_v, bg_v * 1.1];
    let s = size as f32;
    let cx = s * (0.5 + rng.gen_range(-0.15f32..0.15));
    let cy = s * (0.5 + rng.gen_range(-0.15f32..0.15));
    let radius = s * rng.gen_range(0.22f32..0.38);
    let period = rng.gen_range(6.0f32..13.0);
    let phase = rng.gen_range(0.0f32..period);
    let noise_sigma = 0.03f32;

    let mut img = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = match class % 4 {
                // Filled circle.
                0 => ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() <= radius,
                // Filled axis-aligned square.
                1 => (fx - cx).abs() <= radius && (fy - cy).abs() <= radius,
                // Diagonal stripes.
                2 => (((fx + fy + phase) / period).fract() + 1.0).fract() < 0.5,
                // Checkerboard.
                _ => {
                    let cell = (period * 0.75).max(3.0);
                    ((((fx + phase) / cell).floor() + ((fy + phase) / cell).floor()) as i64) % 2
                        == 0
                }
            };
            let base = if inside { fg } else { bg };
            for c in 0..3 {
                let n: f32 = {
                    // Box-Muller from two uniforms keeps the dependency
                    // surface small here.
                    let u1: f32 = rng.gen_range(1e-7f32..1.0);
                    let u2: f32 = rng.gen_range(0.0f32..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
                };
                img[(c * size + y) * size + x] = (base[c] + noise_sigma * n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Renders `num_classes x per_class` PNG images plus a `split.tsv`
/// (every fifth image per class is test). Identical seed, identical bytes.
pub fn gen_synth(
    out_dir: &Path,
    num_classes: usize,
    per_class: usize,
    img_size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "gen_synth: need at least 2 classes, got {num_classes}"
        )));
    }
    if per_class == 0 || img_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "gen_synth: per_class {per_class} and img_size {img_size} must be usable"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut split_lines = String::new();
    let mut classes = Vec::with_capacity(num_classes);
    let mut samples = Vec::new();
    for class in 0..num_classes {
        let cname = format!("class_{class:02}");
        let cdir = out_dir.join(&cname);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for i in 0..per_class {
            let mut rng =
                rng_from_seed(derive_seed(seed, "synth", (class * per_class + i) as u64));
            let pix = render_pattern(class, img_size, &mut rng);
            let mut rgb = image::RgbImage::new(img_size as u32, img_size as u32);
            for y in 0..img_size {
                for x in 0..img_size {
                    let px = [0, 1, 2].map(|c| {
                        (pix[(c * img_size + y) * img_size + x] * 255.0).round() as u8
                    });
                    rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            let fname = format!("img_{i:04}.png");
            let path = cdir.join(&fname);
            rgb.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let split = if i % 5 == 4 { Split::Test } else { Split::Train };
            let rel = PathBuf::from(&cname).join(&fname);
            split_lines.push_str(&format!(
                "{}\t{}\n",
                rel.display(),
                if split == Split::Test { "test" } else { "train" }
            ));
            samples.push((rel, class, split));
        }
        classes.push(cname);
    }
    let split_path = out_dir.join("split.tsv");
    fs::write(&split_path, split_lines).map_err(|e| Error::io(&split_path, e))?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        classes,
        samples,
    })
}
