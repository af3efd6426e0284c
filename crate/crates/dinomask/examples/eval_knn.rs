//! Weighted k-NN evaluation on frozen features, sweeping k and the vote
//! temperature. Features come from the teacher backbone's CLS embedding
//! over center-crop eval views.
//!
//!     cargo run --release --example eval_knn

use std::path::PathBuf;

use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_dataset, Split};
use dinomask::distill;
use dinomask::error::Result;
use dinomask::eval::{extract_features, knn_classify, top1_accuracy};

fn main() -> Result<()> {
    let root = PathBuf::from("runs/eval_knn");
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
    println!(
        "feature banks: {} train / {} test rows, dim {}",
        train_bank.len(),
        test_bank.len(),
        train_bank.dim()
    );

    println!("\nk     temp    top1");
    for &k in &[1usize, 5, 10, 20] {
        for &temp in &[0.07f64, f64::INFINITY] {
            let preds = knn_classify(&train_bank, &test_bank, k, temp)?;
            let acc = top1_accuracy(&preds, &test_bank.labels)?;
            let t = if temp.is_finite() { format!("{temp}") } else { "uniform".into() };
            println!("{k:<5} {t:<7} {acc:.4}");
        }
    }
    println!("\nchance level: {:.4}", 1.0 / 4.0);
    Ok(())
}
