//! Linear probe on frozen features: fit one softmax layer with momentum
//! SGD and a cosine learning-rate schedule, report train/test accuracy.
//!
//!     cargo run --release --example eval_linear

use std::path::PathBuf;

use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_dataset, Split};
use dinomask::distill;
use dinomask::error::Result;
use dinomask::eval::{extract_features, linear_probe, top1_accuracy, ProbeConfig};

fn main() -> Result<()> {
    let root = PathBuf::from("runs/eval_linear");
    let data_dir = root.join("data");
    gen_synth(&data_dir, 4, 60, 64, 0)?;
    let dataset = load_dataset(&data_dir, None)?;

    let mut cfg = RunConfig::desk();
    cfg.mask_ratio = 0.1;
    cfg.num_local_views = 2;
    cfg.total_steps = 150;
    cfg.batch_size = 8;
    cfg.data_root = data_dir.display().to_string();
    let (train_imgs, train_labels) = dataset.split(Split::Train);
    let (test_imgs, test_labels) = dataset.split(Split::Test);
    println!("training {} steps on {} images...", cfg.total_steps, train_imgs.len());
    let out = distill::train(&train_imgs, &cfg, &root.join("run"))?;

    let vit_cfg = cfg.vit();
    let train_bank = extract_features(&out.state.teacher, &vit_cfg, &train_imgs, &train_labels, "train")?;
    let test_bank = extract_features(&out.state.teacher, &vit_cfg, &test_imgs, &test_labels, "test")?;

    let probe_cfg = ProbeConfig {
        epochs: 50,
        lr: 0.1,
        momentum: 0.9,
        batch: 32,
        seed: 0,
    };
    let (probe, test_acc) = linear_probe(&train_bank, &test_bank, &probe_cfg)?;
    let train_preds = probe.predict(&train_bank.features);
    let train_acc = top1_accuracy(&train_preds, &train_bank.labels)?;

    println!("\nprobe: {} epochs, lr {}, momentum {}", probe_cfg.epochs, probe_cfg.lr, probe_cfg.momentum);
    println!("train top1: {train_acc:.4}");
    println!("test  top1: {test_acc:.4} (chance 0.25)");
    Ok(())
}
