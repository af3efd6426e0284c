//! Visualizes the asymmetric view layout for one image: the teacher's
//! clean global crops, the student's masked copies, and clean locals.
//!
//! Prints the patch-level mask plan as an ASCII grid and writes PNG
//! panels under `runs/mask_preview/`.
//!
//!     cargo run --release --example mask_preview

use std::path::PathBuf;

use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_image};
use dinomask::error::Result;
use dinomask::rng::derive_seed;
use dinomask::views::make_raw_views;
use dinomask::viz::mask_preview;

fn main() -> Result<()> {
    let root = PathBuf::from("runs/mask_preview");
    let manifest = gen_synth(&root.join("data"), 4, 2, 64, 42)?;
    // Manifest sample paths are relative to the dataset root.
    let (rel, _, _) = &manifest.samples[1];
    let sample_path = manifest.root.join(rel);
    let image = load_image(&sample_path)?;
    println!("input: {}", sample_path.display());

    let mut view_cfg = RunConfig::desk().views();
    view_cfg.mask_ratio = 0.3;
    let seed = derive_seed(42, "preview", 0);

    // The raw views carry the mask plans; print them before normalization.
    let raw = make_raw_views(&image, &view_cfg, seed)?;
    for (v, plan) in raw.plans.iter().enumerate() {
        let (rows, cols) = plan.grid;
        println!(
            "\nglobal view {v}: {}/{} cells masked (r = {})",
            plan.masked_patches(),
            plan.total_patches(),
            plan.ratio
        );
        for r in 0..rows {
            let line: String = (0..cols)
                .map(|c| if plan.indices.contains(&(r * cols + c)) { '#' } else { '.' })
                .collect();
            println!("  {line}");
        }
    }

    let panels = mask_preview(&image, &view_cfg, seed, &root.join("panels"))?;
    println!("\npanels:");
    for p in &panels {
        println!("  {}", p.display());
    }
    Ok(())
}
