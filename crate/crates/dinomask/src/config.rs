//! Flat `key=value` run configuration.
//!
//! Defaults reproduce the paper-scale training recipe; [`RunConfig::desk`]
//! swaps in the small-model preset the test suite and examples run on.
//! The canonical text form (fixed key order) feeds both the
//! `config.resolved` echo and the checkpoint fingerprint.

use crate::error::{Error, Result};
use crate::optim::Schedules;
use crate::rng::fnv1a64;
use crate::views::ViewConfig;
use crate::vit::ViTConfig;

macro_rules! config_fields {
    ($apply:ident) => {
        $apply! {
            (patch_size, usize, "ViT patch size in pixels"),
            (embed_dim, usize, "token embedding width"),
            (depth, usize, "transformer block count"),
            (heads, usize, "attention heads per block"),
            (mlp_ratio, f64, "MLP hidden width as a multiple of embed_dim"),
            (head_hidden_dim, usize, "projection head hidden width"),
            (head_bottleneck_dim, usize, "projection head bottleneck width"),
            (head_out_dim, usize, "projection output dimension K"),
            (img_size_global, usize, "global crop resolution"),
            (img_size_local, usize, "local crop resolution"),
            (num_global_views, usize, "global crops per image (must be 2)"),
            (num_local_views, usize, "local crops per image"),
            (global_scale_min, f64, "global crop area fraction lower bound"),
            (global_scale_max, f64, "global crop area fraction upper bound"),
            (local_scale_min, f64, "local crop area fraction lower bound"),
            (local_scale_max, f64, "local crop area fraction upper bound"),
            (mask_ratio, f64, "fraction r of patch cells masked in student globals"),
            (hflip_prob, f64, "horizontal flip probability"),
            (color_jitter, bool, "enable brightness/contrast jitter"),
            (epochs, u64, "training epochs"),
            (total_steps, u64, "hard step budget; 0 derives from epochs"),
            (batch_size, usize, "images per optimization step"),
            (base_lr, f64, "peak learning rate before batch scaling (x batch/256)"),
            (min_lr, f64, "cosine learning-rate floor"),
            (warmup_frac, f64, "fraction of steps spent in linear warmup"),
            (weight_decay_start, f64, "weight decay at step 0 (cosine start)"),
            (weight_decay_end, f64, "weight decay at the final step (cosine end)"),
            (grad_clip, f64, "global gradient-norm clip"),
            (teacher_temp, f64, "teacher softmax temperature"),
            (student_temp, f64, "student softmax temperature"),
            (center_momentum, f64, "teacher-logit center EMA momentum"),
            (ema_start, f64, "teacher EMA momentum at step 0 (cosine start)"),
            (ema_end, f64, "teacher EMA momentum at the final step (cosine end)"),
            (adam_beta1, f64, "AdamW beta1"),
            (adam_beta2, f64, "AdamW beta2"),
            (adam_eps, f64, "AdamW epsilon"),
            (freeze_last_layer_epochs, u64, "epochs to freeze the prototype layer"),
            (checkpoint_every, u64, "checkpoint interval in epochs (always at end)"),
            (seed, u64, "run seed; all randomness derives from it"),
            (data_root, String, "dataset root directory"),
            (knn_k, usize, "k-NN neighbor count"),
            (knn_temp, f64, "k-NN vote temperature (inf = uniform weights)"),
            (probe_epochs, u64, "linear probe epoch budget"),
            (probe_lr, f64, "linear probe peak learning rate"),
            (probe_momentum, f64, "linear probe SGD momentum"),
        }
    };
}

macro_rules! define_struct {
    ($(($name:ident, $ty:ty, $doc:expr)),+ $(,)?) => {
        /// Every tunable of a run. See module docs for the text format.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $name: $ty,)+
        }
    };
}
config_fields!(define_struct);

macro_rules! impl_accessors {
    ($(($name:ident, $ty:ty, $doc:expr)),+ $(,)?) => {
        /// Assigns one key. Unknown keys and unparsable values are config errors.
        pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($name) => {
                    self.$name = parse_value::<$ty>(key, value)?;
                })+
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
            Ok(())
        }

        /// Canonical text form: fixed key order, `key=value`, `#` comments.
        pub fn to_text(&self) -> String {
            let mut out = String::from("# dinomask run configuration\n");
            $(
                out.push_str(stringify!($name));
                out.push('=');
                out.push_str(&self.$name.to_string());
                out.push('\n');
            )+
            out
        }

        /// `(key, description, default)` for every key, in canonical order.
        pub fn key_docs() -> Vec<(&'static str, &'static str, String)> {
            let d = RunConfig::default();
            vec![
                $((stringify!($name), $doc, d.$name.to_string()),)+
            ]
        }
    };
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4.0,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            head_out_dim: 65536,
            img_size_global: 224,
            img_size_local: 96,
            num_global_views: 2,
            num_local_views: 8,
            global_scale_min: 0.4,
            global_scale_max: 1.0,
            local_scale_min: 0.05,
            local_scale_max: 0.4,
            mask_ratio: 0.1,
            hflip_prob: 0.5,
            color_jitter: false,
            epochs: 100,
            total_steps: 0,
            batch_size: 50,
            base_lr: 0.0005,
            min_lr: 1e-6,
            warmup_frac: 0.1,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            grad_clip: 3.0,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze_last_layer_epochs: 0,
            checkpoint_every: 10,
            seed: 0,
            data_root: String::new(),
            knn_k: 20,
            knn_temp: 0.07,
            probe_epochs: 50,
            probe_lr: 0.1,
            probe_momentum: 0.9,
        }
    }
}

impl RunConfig {
    config_fields!(impl_accessors);

    /// Small-model preset sized so a full training run takes minutes on a
    /// laptop CPU: 64/32 px views, patch 8, 4 blocks, K=256, batch 16.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            head_hidden_dim: 256,
            head_bottleneck_dim: 64,
            head_out_dim: 256,
            img_size_global: 64,
            img_size_local: 32,
            batch_size: 16,
            ..Self::default()
        }
    }

    /// Applies `key=value` lines onto `self`. Blank lines and `#` comments
    /// are ignored; later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Hash of the canonical text; stored in checkpoints to detect loading a
    /// model under a different architecture.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 {
            return fail("patch_size must be positive".into());
        }
        for (name, size) in [
            ("img_size_global", self.img_size_global),
            ("img_size_local", self.img_size_local),
        ] {
            if size == 0 || size % self.patch_size != 0 {
                return fail(format!(
                    "{name}={size} must be a positive multiple of patch_size={}",
                    self.patch_size
                ));
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim={} must be divisible by heads={}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.head_out_dim < 2 {
            return fail(format!("head_out_dim={} must be at least 2", self.head_out_dim));
        }
        if self.head_hidden_dim == 0 || self.head_bottleneck_dim == 0 {
            return fail("projection head dimensions must be positive".into());
        }
        if self.num_global_views != 2 {
            return fail(format!(
                "num_global_views={} is unsupported; the objective pairs exactly 2 globals",
                self.num_global_views
            ));
        }
        for (name, lo, hi) in [
            ("global_scale", self.global_scale_min, self.global_scale_max),
            ("local_scale", self.local_scale_min, self.local_scale_max),
        ] {
            if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
                return fail(format!("{name} range [{lo}, {hi}] must satisfy 0 < min <= max <= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio={} must lie in [0, 1]", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return fail(format!("hflip_prob={} must lie in [0, 1]", self.hflip_prob));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.teacher_temp > 0.0) || !(self.student_temp > 0.0) {
            return fail(format!(
                "temperatures must be positive (teacher={}, student={})",
                self.teacher_temp, self.student_temp
            ));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return fail(format!("center_momentum={} must lie in [0, 1]", self.center_momentum));
        }
        for (name, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name}={v} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail(format!("warmup_frac={} must lie in [0, 1)", self.warmup_frac));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip={} must be positive", self.grad_clip));
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 {
            return fail("learning rates must be non-negative".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        if !(self.knn_temp > 0.0) && !self.knn_temp.is_infinite() {
            return fail(format!("knn_temp={} must be positive or inf", self.knn_temp));
        }
        Ok(())
    }

    /// Peak learning rate after linear batch scaling.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            img_size_global: self.img_size_global,
            img_size_local: self.img_size_local,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            head_hidden_dim: self.head_hidden_dim,
            head_bottleneck_dim: self.head_bottleneck_dim,
            head_out_dim: self.head_out_dim,
        }
    }

    pub fn views(&self) -> ViewConfig {
        ViewConfig {
            img_size_global: self.img_size_global,
            img_size_local: self.img_size_local,
            patch_size: self.patch_size,
            num_local_views: self.num_local_views,
            global_scale: (self.global_scale_min, self.global_scale_max),
            local_scale: (self.local_scale_min, self.local_scale_max),
            mask_ratio: self.mask_ratio,
            hflip_prob: self.hflip_prob,
            color_jitter: self.color_jitter,
        }
    }

    /// Schedule bundle for a run of `total_steps` optimization steps.
    pub fn schedules(&self, total_steps: u64) -> Schedules {
        let total = total_steps.max(1);
        Schedules {
            total_steps: total,
            warmup_steps: (self.warmup_frac * total as f64).round() as u64,
            peak_lr: self.peak_lr(),
            min_lr: self.min_lr,
            wd_base: self.weight_decay_start,
            wd_final: self.weight_decay_end,
            ema_base: self.ema_start,
            ema_final: self.ema_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_paper_scale() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 50);
        assert_eq!(c.base_lr, 0.0005);
        assert_eq!(c.weight_decay_start, 0.04);
        assert_eq!(c.weight_decay_end, 0.4);
        assert_eq!(c.grad_clip, 3.0);
        assert_eq!(c.ema_start, 0.996);
        assert_eq!(c.ema_end, 1.0);
        assert_eq!(c.head_out_dim, 65536);
        assert_eq!(c.student_temp, 0.1);
        assert_eq!(c.teacher_temp, 0.04);
        assert_eq!(c.center_momentum, 0.9);
        assert_eq!(c.num_global_views, 2);
        assert_eq!(c.num_local_views, 8);
        assert_eq!((c.global_scale_min, c.global_scale_max), (0.4, 1.0));
        assert_eq!((c.local_scale_min, c.local_scale_max), (0.05, 0.4));
        assert_eq!(c.mask_ratio, 0.1);
        assert_eq!(c.patch_size, 16);
        c.validate().unwrap();
    }

    #[test]
    fn desk_preset_validates_and_scales_down() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.img_size_global, 64);
        assert_eq!(c.img_size_local, 32);
        assert_eq!(c.patch_size, 8);
        assert_eq!(c.head_out_dim, 256);
        assert_eq!(c.batch_size, 16);
        // Non-model keys inherit paper values.
        assert_eq!(c.teacher_temp, 0.04);
        assert_eq!(c.mask_ratio, 0.1);
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = RunConfig::desk();
        c.mask_ratio = 0.25;
        c.data_root = "/tmp/data".into();
        c.seed = 42;
        let parsed = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(c, parsed);
        assert_eq!(c.fingerprint(), parsed.fingerprint());
    }

    #[test]
    fn set_rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("mask_ratio", "abc").is_err());
        c.set("mask_ratio", "0.3").unwrap();
        assert_eq!(c.mask_ratio, 0.3);
    }

    #[test]
    fn apply_text_skips_comments_and_blank_lines() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\n  mask_ratio = 0.2 \nseed=7\n").unwrap();
        assert_eq!(c.mask_ratio, 0.2);
        assert_eq!(c.seed, 7);
        assert!(c.apply_text("garbage line").is_err());
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut c = RunConfig::desk();
        c.img_size_global = 63;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.embed_dim = 97;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.mask_ratio = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.num_global_views = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn peak_lr_scales_with_batch() {
        let mut c = RunConfig::default();
        c.batch_size = 256;
        assert_eq!(c.peak_lr(), 0.0005);
        c.batch_size = 64;
        assert_eq!(c.peak_lr(), 0.000125);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.depth = 11;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn key_docs_cover_every_line_of_to_text() {
        let docs = RunConfig::key_docs();
        let text = RunConfig::default().to_text();
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(docs.len(), lines.len());
        for ((key, _, default), line) in docs.iter().zip(lines) {
            assert_eq!(*line, format!("{key}={default}"));
        }
    }
}
