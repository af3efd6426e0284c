//! Desk-scale self-distillation for Vision Transformers with asymmetric
//! random masking: the student's global views are patch-masked while the
//! teacher's globals and the student's local crops stay clean.
//!
//! The crate is self-contained on CPU: a small tensor engine with
//! reverse-mode autodiff, a ViT backbone with projection head, the
//! multi-crop view pipeline, the distillation loss with EMA teacher and
//! centering, k-NN / linear-probe evaluation, and attention-map export.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `dinomask` binary (`train`, `eval-knn`, `eval-linear`,
//! `mask-preview`, `attn-viz`, `gen-synth`).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod views;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorF32, TensorF64};
