//! Exports last-block CLS attention maps, the standard figure for
//! inspecting what a trained (or here: briefly trained) model attends to.
//!
//! Writes one grayscale PGM per head plus the head average under
//! `runs/attention_maps/`.
//!
//!     cargo run --release --example attention_maps

use std::path::PathBuf;

use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_dataset, load_image, Split};
use dinomask::distill;
use dinomask::error::Result;
use dinomask::tensor::stack;
use dinomask::tensor::tape::Tape;
use dinomask::views::{eval_view, normalize_image};
use dinomask::vit::{backbone_forward, stage_model};
use dinomask::viz::export_attention;

fn main() -> Result<()> {
    let root = PathBuf::from("runs/attention_maps");
    let data_dir = root.join("data");
    let manifest = gen_synth(&data_dir, 4, 25, 64, 7)?;

    // A handful of steps is enough to move attention away from its random
    // initialization; bump total_steps for sharper maps.
    let mut cfg = RunConfig::desk();
    cfg.num_local_views = 2;
    cfg.total_steps = 60;
    cfg.batch_size = 8;
    cfg.data_root = data_dir.display().to_string();
    let dataset = load_dataset(&data_dir, None)?;
    let (images, _) = dataset.split(Split::Train);
    println!("training {} steps for a non-random teacher...", cfg.total_steps);
    let out = distill::train(&images, &cfg, &root.join("run"))?;

    let vit_cfg = cfg.vit();
    // Manifest sample paths are relative to the dataset root.
    let (rel, class, _) = &manifest.samples[0];
    let sample_path = manifest.root.join(rel);
    println!("input: {} (class {class})", sample_path.display());
    let image = load_image(&sample_path)?;
    let mut view = eval_view(&image, vit_cfg.img_size_global)?;
    normalize_image(&mut view);
    let batch = stack(&[&view])?;

    let mut tape = Tape::<f32>::new();
    let staged = stage_model(&mut tape, &out.state.teacher);
    let fwd = backbone_forward(&mut tape, &staged, &vit_cfg, &batch)?;

    let paths = export_attention(
        &fwd.last_attn,
        vit_cfg.img_size_global,
        vit_cfg.patch_size,
        &root.join("maps"),
        "sample",
    )?;
    println!("attention shape {:?}", fwd.last_attn.shape());
    for p in &paths {
        println!("  {}", p.display());
    }
    Ok(())
}
