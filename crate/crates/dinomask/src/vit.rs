//! Vision Transformer backbone with CLS token, learned positional
//! embeddings (bilinearly resampled across view resolutions), pre-norm
//! blocks, and the projection head with L2-normalized bottleneck and
//! weight-normalized prototype layer.
//!
//! Parameters live in plain tensors; [`stage_model`] copies them onto a tape
//! once per step so gradients from every view accumulate into one leaf per
//! parameter.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};
use rand::Rng;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters shared by backbone and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub img_size_global: usize,
    pub img_size_local: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub head_out_dim: usize,
}

impl ViTConfig {
    /// Patch-grid side length at a given square resolution.
    pub fn grid(&self, img_size: usize) -> usize {
        img_size / self.patch_size
    }

    /// Token count including CLS: `(S/p)^2 + 1`.
    pub fn tokens(&self, img_size: usize) -> usize {
        let g = self.grid(img_size);
        g * g + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.img_size_global % self.patch_size != 0
            || self.img_size_local % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "view sizes {}/{} must be multiples of patch_size {}",
                self.img_size_global, self.img_size_local, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.head_out_dim < 2 {
            return Err(Error::Config("head_out_dim must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams<T: Scalar> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    /// Positional table at the global-grid resolution, CLS row first.
    pub pos: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct HeadParams<T: Scalar> {
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub fc3_w: Tensor<T>,
    pub fc3_b: Tensor<T>,
    /// `[K, bottleneck]`, L2-normalized per row at use (frozen unit scale).
    pub proto: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DinoParams<T: Scalar> {
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
}

fn zeros_t<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec())
}

fn ones_t<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::full(vec![n], T::one())
}

impl<T: Scalar> DinoParams<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer norms.
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p2c = 3 * cfg.patch_size * cfg.patch_size;
        let h = cfg.mlp_hidden();
        let g = cfg.grid(cfg.img_size_global);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_gamma: ones_t(d),
                ln1_beta: zeros_t(&[d]),
                qkv_w: Tensor::randn(vec![d, 3 * d], INIT_STD, rng),
                qkv_b: zeros_t(&[3 * d]),
                proj_w: Tensor::randn(vec![d, d], INIT_STD, rng),
                proj_b: zeros_t(&[d]),
                ln2_gamma: ones_t(d),
                ln2_beta: zeros_t(&[d]),
                fc1_w: Tensor::randn(vec![d, h], INIT_STD, rng),
                fc1_b: zeros_t(&[h]),
                fc2_w: Tensor::randn(vec![h, d], INIT_STD, rng),
                fc2_b: zeros_t(&[d]),
            })
            .collect();
        let hh = cfg.head_hidden_dim;
        let bn = cfg.head_bottleneck_dim;
        let params = Self {
            backbone: BackboneParams {
                patch_w: Tensor::randn(vec![p2c, d], INIT_STD, rng),
                patch_b: zeros_t(&[d]),
                cls: Tensor::randn(vec![1, d], INIT_STD, rng),
                pos: Tensor::randn(vec![g * g + 1, d], INIT_STD, rng),
                blocks,
                norm_gamma: ones_t(d),
                norm_beta: zeros_t(&[d]),
            },
            head: HeadParams {
                fc1_w: Tensor::randn(vec![d, hh], INIT_STD, rng),
                fc1_b: zeros_t(&[hh]),
                fc2_w: Tensor::randn(vec![hh, hh], INIT_STD, rng),
                fc2_b: zeros_t(&[hh]),
                fc3_w: Tensor::randn(vec![hh, bn], INIT_STD, rng),
                fc3_b: zeros_t(&[bn]),
                proto: Tensor::randn(vec![cfg.head_out_dim, bn], INIT_STD, rng),
            },
        };
        Ok(params)
    }

    /// Canonical `(name, tensor)` walk; the order is the contract for
    /// optimizer state, gradients, and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("backbone.patch_w".into(), &self.backbone.patch_w),
            ("backbone.patch_b".into(), &self.backbone.patch_b),
            ("backbone.cls".into(), &self.backbone.cls),
            ("backbone.pos".into(), &self.backbone.pos),
        ];
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_gamma", &b.ln1_gamma),
                ("ln1_beta", &b.ln1_beta),
                ("qkv_w", &b.qkv_w),
                ("qkv_b", &b.qkv_b),
                ("proj_w", &b.proj_w),
                ("proj_b", &b.proj_b),
                ("ln2_gamma", &b.ln2_gamma),
                ("ln2_beta", &b.ln2_beta),
                ("fc1_w", &b.fc1_w),
                ("fc1_b", &b.fc1_b),
                ("fc2_w", &b.fc2_w),
                ("fc2_b", &b.fc2_b),
            ] {
                out.push((format!("backbone.blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("backbone.norm_gamma".into(), &self.backbone.norm_gamma));
        out.push(("backbone.norm_beta".into(), &self.backbone.norm_beta));
        for (suffix, t) in [
            ("fc1_w", &self.head.fc1_w),
            ("fc1_b", &self.head.fc1_b),
            ("fc2_w", &self.head.fc2_w),
            ("fc2_b", &self.head.fc2_b),
            ("fc3_w", &self.head.fc3_w),
            ("fc3_b", &self.head.fc3_b),
            ("proto", &self.head.proto),
        ] {
            out.push((format!("head.{suffix}"), t));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("backbone.patch_w".into(), &mut self.backbone.patch_w),
            ("backbone.patch_b".into(), &mut self.backbone.patch_b),
            ("backbone.cls".into(), &mut self.backbone.cls),
            ("backbone.pos".into(), &mut self.backbone.pos),
        ];
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_gamma", &mut b.ln1_gamma),
                ("ln1_beta", &mut b.ln1_beta),
                ("qkv_w", &mut b.qkv_w),
                ("qkv_b", &mut b.qkv_b),
                ("proj_w", &mut b.proj_w),
                ("proj_b", &mut b.proj_b),
                ("ln2_gamma", &mut b.ln2_gamma),
                ("ln2_beta", &mut b.ln2_beta),
                ("fc1_w", &mut b.fc1_w),
                ("fc1_b", &mut b.fc1_b),
                ("fc2_w", &mut b.fc2_w),
                ("fc2_b", &mut b.fc2_b),
            ] {
                out.push((format!("backbone.blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("backbone.norm_gamma".into(), &mut self.backbone.norm_gamma));
        out.push(("backbone.norm_beta".into(), &mut self.backbone.norm_beta));
        for (suffix, t) in [
            ("fc1_w", &mut self.head.fc1_w),
            ("fc1_b", &mut self.head.fc1_b),
            ("fc2_w", &mut self.head.fc2_w),
            ("fc2_b", &mut self.head.fc2_b),
            ("fc3_w", &mut self.head.fc3_w),
            ("fc3_b", &mut self.head.fc3_b),
            ("proto", &mut self.head.proto),
        ] {
            out.push((format!("head.{suffix}"), t));
        }
        out
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        for (_, t) in self.named_mut() {
            t.requires_grad = requires;
        }
    }

    pub fn cast<U: Scalar>(&self) -> DinoParams<U> {
        let mut out = DinoParams {
            backbone: BackboneParams {
                patch_w: self.backbone.patch_w.cast(),
                patch_b: self.backbone.patch_b.cast(),
                cls: self.backbone.cls.cast(),
                pos: self.backbone.pos.cast(),
                blocks: self
                    .backbone
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        ln1_gamma: b.ln1_gamma.cast(),
                        ln1_beta: b.ln1_beta.cast(),
                        qkv_w: b.qkv_w.cast(),
                        qkv_b: b.qkv_b.cast(),
                        proj_w: b.proj_w.cast(),
                        proj_b: b.proj_b.cast(),
                        ln2_gamma: b.ln2_gamma.cast(),
                        ln2_beta: b.ln2_beta.cast(),
                        fc1_w: b.fc1_w.cast(),
                        fc1_b: b.fc1_b.cast(),
                        fc2_w: b.fc2_w.cast(),
                        fc2_b: b.fc2_b.cast(),
                    })
                    .collect(),
                norm_gamma: self.backbone.norm_gamma.cast(),
                norm_beta: self.backbone.norm_beta.cast(),
            },
            head: HeadParams {
                fc1_w: self.head.fc1_w.cast(),
                fc1_b: self.head.fc1_b.cast(),
                fc2_w: self.head.fc2_w.cast(),
                fc2_b: self.head.fc2_b.cast(),
                fc3_w: self.head.fc3_w.cast(),
                fc3_b: self.head.fc3_b.cast(),
                proto: self.head.proto.cast(),
            },
        };
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            dst.requires_grad = src.requires_grad;
        }
        out
    }

    /// Whether decoupled weight decay applies to this parameter: weight
    /// matrices and prototypes decay, biases/norms/CLS/positional do not.
    pub fn decays(name: &str) -> bool {
        name.ends_with("_w") || name.ends_with("proto")
    }
}

/// Tape leaf ids for one staged copy of the parameters.
pub struct StagedModel {
    ids: Vec<(String, NodeId)>,
}

impl StagedModel {
    pub fn named_ids(&self) -> &[(String, NodeId)] {
        &self.ids
    }

    fn id(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown staged parameter {name}"))
            .1
    }
}

/// Copies every parameter onto the tape as a leaf. Call once per tape.
pub fn stage_model<T: Scalar>(tape: &mut Tape<T>, params: &DinoParams<T>) -> StagedModel {
    let ids = params
        .named()
        .into_iter()
        .map(|(name, t)| (name, tape.leaf(t)))
        .collect();
    StagedModel { ids }
}

/// Backbone result: CLS embedding node plus the last block's attention.
pub struct BackboneOutput<T: Scalar> {
    pub cls: NodeId,
    pub last_attn: Tensor<T>,
}

/// Row-stochastic bilinear resampling matrix `[to^2, from^2]` between two
/// square patch grids (half-pixel centers, edge clamped).
pub fn pos_interp_matrix<T: Scalar>(from: usize, to: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); to * to * from * from];
    let ratio = from as f64 / to as f64;
    for oy in 0..to {
        for ox in 0..to {
            let row = (oy * to + ox) * from * from;
            let fy = ((oy as f64 + 0.5) * ratio - 0.5).clamp(0.0, (from - 1) as f64);
            let fx = ((ox as f64 + 0.5) * ratio - 0.5).clamp(0.0, (from - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(from - 1);
            let x1 = (x0 + 1).min(from - 1);
            let wy = fy - y0 as f64;
            let wx = fx - x0 as f64;
            for (yy, xx, w) in [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ] {
                m[row + yy * from + xx] += T::from_f64(w);
            }
        }
    }
    Tensor::new_unchecked(m, vec![to * to, from * from])
}

/// Positional rows for a view resolution: the native table when the grids
/// match, otherwise CLS row kept + patch rows resampled (on tape, so the
/// table still trains through the interpolation).
fn positional_for<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedModel,
    cfg: &ViTConfig,
    img_size: usize,
) -> Result<NodeId> {
    let pos = staged.id("backbone.pos");
    let native = cfg.grid(cfg.img_size_global);
    let target = cfg.grid(img_size);
    if native == target {
        return Ok(pos);
    }
    let cls_row = tape.gather_rows(pos, &[0])?;
    let patch_idx: Vec<usize> = (1..=native * native).collect();
    let patch_rows = tape.gather_rows(pos, &patch_idx)?;
    let m = pos_interp_matrix::<T>(native, target);
    let m_id = tape.constant(&m);
    let resampled = tape.matmul(m_id, patch_rows)?;
    tape.concat_rows(cls_row, resampled)
}

/// ViT forward over a `[B, 3, S, S]` batch. The images enter the tape as
/// constants; gradients flow only into parameters.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedModel,
    cfg: &ViTConfig,
    images: &Tensor<T>,
) -> Result<BackboneOutput<T>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::shape(
            "backbone_forward",
            "[B, 3, S, S] images",
            format!("{shape:?}"),
        ));
    }
    let (batch, img_size) = (shape[0], shape[2]);
    if img_size % cfg.patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "backbone_forward: resolution {img_size} is not a multiple of patch size {}",
            cfg.patch_size
        )));
    }
    let tokens = cfg.tokens(img_size);

    let img_id = tape.constant(images);
    let patches = tape.patch_extract(img_id, cfg.patch_size)?;
    let embedded = tape.matmul(patches, staged.id("backbone.patch_w"))?;
    let embedded = tape.add_bias(embedded, staged.id("backbone.patch_b"))?;
    let mut x = tape.prepend_cls(embedded, staged.id("backbone.cls"), batch)?;
    let pos = positional_for(tape, staged, cfg, img_size)?;
    let pos_tiled = tape.tile_rows(pos, batch)?;
    x = tape.add(x, pos_tiled)?;

    let mut last_mha = None;
    for i in 0..cfg.depth {
        let name = |s: &str| format!("backbone.blocks.{i}.{s}");
        let h = tape.layer_norm(x, staged.id(&name("ln1_gamma")), staged.id(&name("ln1_beta")), LN_EPS)?;
        let qkv = tape.matmul(h, staged.id(&name("qkv_w")))?;
        let qkv = tape.add_bias(qkv, staged.id(&name("qkv_b")))?;
        let attn = tape.multi_head_attention(qkv, batch, tokens, cfg.heads)?;
        last_mha = Some(attn);
        let proj = tape.matmul(attn, staged.id(&name("proj_w")))?;
        let proj = tape.add_bias(proj, staged.id(&name("proj_b")))?;
        x = tape.add(x, proj)?;
        let h2 = tape.layer_norm(x, staged.id(&name("ln2_gamma")), staged.id(&name("ln2_beta")), LN_EPS)?;
        let f = tape.matmul(h2, staged.id(&name("fc1_w")))?;
        let f = tape.add_bias(f, staged.id(&name("fc1_b")))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, staged.id(&name("fc2_w")))?;
        let f = tape.add_bias(f, staged.id(&name("fc2_b")))?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(
        x,
        staged.id("backbone.norm_gamma"),
        staged.id("backbone.norm_beta"),
        LN_EPS,
    )?;
    let cls_indices: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let cls = tape.gather_rows(x, &cls_indices)?;
    let last_attn = tape.attn_probs(last_mha.expect("depth >= 1"))?;
    Ok(BackboneOutput { cls, last_attn })
}

/// Projection head: 3-layer GELU MLP to a bottleneck, L2-normalize, then a
/// weight-normalized prototype layer (no bias, unit scale).
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedModel,
    cls: NodeId,
) -> Result<NodeId> {
    let h = tape.matmul(cls, staged.id("head.fc1_w"))?;
    let h = tape.add_bias(h, staged.id("head.fc1_b"))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, staged.id("head.fc2_w"))?;
    let h = tape.add_bias(h, staged.id("head.fc2_b"))?;
    let h = tape.gelu(h)?;
    let z = tape.matmul(h, staged.id("head.fc3_w"))?;
    let z = tape.add_bias(z, staged.id("head.fc3_b"))?;
    let zn = tape.l2_normalize_rows(z)?;
    let wn = tape.l2_normalize_rows(staged.id("head.proto"))?;
    tape.matmul_nt(zn, wn)
}

/// Gradients for every parameter in canonical order; zeros where a
/// parameter did not participate.
pub fn collect_grads<T: Scalar>(tape: &Tape<T>, staged: &StagedModel) -> Vec<Vec<T>> {
    staged
        .named_ids()
        .iter()
        .map(|(_, id)| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); tape.value(*id).len()])
        })
        .collect()
}
