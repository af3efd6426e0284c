//! Checkpoint persistence: save, reload, verify bit-exactness, and resume
//! training from the stored state.
//!
//!     cargo run --release --example checkpoint_roundtrip

use std::fs;
use std::path::PathBuf;

use dinomask::checkpoint::{compatible, load_checkpoint, save_checkpoint};
use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_dataset, Split};
use dinomask::distill;
use dinomask::error::Result;
use dinomask::rng::sample_seed;
use dinomask::views::{make_views, ViewSet};

fn main() -> Result<()> {
    let root = PathBuf::from("runs/checkpoint_roundtrip");
    let data_dir = root.join("data");
    gen_synth(&data_dir, 2, 10, 32, 9)?;
    let dataset = load_dataset(&data_dir, None)?;
    let (images, _) = dataset.split(Split::Train);

    let mut cfg = RunConfig::desk();
    cfg.img_size_global = 32;
    cfg.img_size_local = 16;
    cfg.embed_dim = 32;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.head_hidden_dim = 64;
    cfg.head_bottleneck_dim = 16;
    cfg.head_out_dim = 32;
    cfg.num_local_views = 2;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.data_root = data_dir.display().to_string();

    let out = distill::train(&images, &cfg, &root.join("run"))?;
    println!("trained {} steps -> {}", out.state.step, out.final_checkpoint.display());

    let (loaded, loaded_cfg) = load_checkpoint(&out.final_checkpoint)?;
    println!("reloaded: step {}, seed {}", loaded.step, loaded.seed);
    assert!(compatible(&cfg, &loaded_cfg));

    // save -> load -> save is byte-identical.
    let resaved = root.join("resaved.ckpt");
    save_checkpoint(&loaded, &loaded_cfg, &resaved)?;
    let original = fs::read(&out.final_checkpoint).expect("read original");
    assert_eq!(original, fs::read(&resaved).expect("read resaved"), "round trip changed bytes");
    println!("round trip byte-identical ({} bytes)", original.len());

    // The loaded state is a live TrainState; keep training from it.
    let mut state = loaded;
    let sch = loaded_cfg.schedules(state.step + 5);
    let view_cfg = loaded_cfg.views();
    for i in 0..5u64 {
        let batch: Vec<ViewSet> = images
            .iter()
            .take(loaded_cfg.batch_size)
            .enumerate()
            .map(|(j, img)| {
                make_views(img, &view_cfg, sample_seed(state.seed, 100 + i, j as u64))
            })
            .collect::<dinomask::error::Result<_>>()?;
        let epoch = state.step / 3;
        let m = distill::train_step(&mut state, &batch, epoch, &loaded_cfg, &sch)?;
        println!("resumed step {}: loss {:.4}", m.step, m.loss);
    }
    Ok(())
}
