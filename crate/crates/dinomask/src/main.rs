//! Command-line driver: train, eval-knn, eval-linear, mask-preview,
//! attn-viz, gen-synth. Every subcommand resolves a full `RunConfig`
//! (preset -> config file -> --set overrides -> convenience flags), writes
//! it to `<run_dir>/config.resolved`, and exits 0/1/2/3 per error class.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dinomask::checkpoint::{compatible, load_checkpoint};
use dinomask::config::RunConfig;
use dinomask::data::{gen_synth, load_dataset, load_image, Split};
use dinomask::distill;
use dinomask::error::{Error, Result};
use dinomask::eval::{extract_features, knn_classify, linear_probe, top1_accuracy, ProbeConfig};
use dinomask::rng::derive_seed;
use dinomask::tensor::stack;
use dinomask::tensor::tape::Tape;
use dinomask::views::normalize_image;
use dinomask::vit::{backbone_forward, stage_model};
use dinomask::viz;

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (defaults shown at paper scale):\n");
    for (key, doc, default) in RunConfig::key_docs() {
        s.push_str(&format!("  {key:<26} {doc} [default: {default}]\n"));
    }
    s
}

#[derive(Parser)]
#[command(
    name = "dinomask",
    version,
    about = "Self-distillation training with student-side global-view masking",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file applied over the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set mask_ratio=0.2.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run seed; every random stream derives from it.
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for run artifacts.
    #[arg(long, value_name = "DIR", default_value = "runs/out")]
    run_dir: PathBuf,

    /// Starting preset: `paper` (reference hyperparameters) or `desk`
    /// (small model that trains on a CPU in minutes).
    #[arg(long, value_parser = ["paper", "desk"], default_value = "paper")]
    preset: String,
}

impl Common {
    fn base(&self) -> RunConfig {
        match self.preset.as_str() {
            "desk" => RunConfig::desk(),
            _ => RunConfig::default(),
        }
    }

    fn apply_file_and_overrides(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(())
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.base();
        self.apply_file_and_overrides(&mut cfg)?;
        Ok(cfg)
    }

    fn write_resolved(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let path = self.run_dir.join("config.resolved");
        fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run self-distillation training on an image-folder dataset.
    #[command(after_help = config_keys_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint with weighted k-NN on frozen features.
    #[command(after_help = config_keys_help())]
    EvalKnn(EvalArgs),
    /// Evaluate a checkpoint with a linear probe on frozen features.
    #[command(after_help = config_keys_help())]
    EvalLinear(EvalArgs),
    /// Write the view-layout panels (original, masked globals, locals).
    #[command(after_help = config_keys_help())]
    MaskPreview(MaskPreviewArgs),
    /// Export per-head CLS attention maps for one image.
    #[command(after_help = config_keys_help())]
    AttnViz(AttnVizArgs),
    /// Generate the synthetic geometric-pattern dataset.
    #[command(after_help = config_keys_help())]
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,

    /// Dataset root; shorthand for --set data_root=PATH.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Patch mask ratio for the student's global views; 0 disables masking.
    #[arg(long, value_name = "R")]
    mask_ratio: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint to evaluate (its embedded config is the base here).
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Dataset root; shorthand for --set data_root=PATH.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Proceed even if overrides change the model architecture.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MaskPreviewArgs {
    #[command(flatten)]
    common: Common,

    /// Input image (PNG or PPM).
    #[arg(long, value_name = "PATH")]
    image: PathBuf,

    /// Patch mask ratio; shorthand for --set mask_ratio=R.
    #[arg(long, value_name = "R")]
    mask_ratio: Option<f64>,
}

#[derive(Args)]
struct AttnVizArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint providing the teacher backbone.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Input image (PNG or PPM).
    #[arg(long, value_name = "PATH")]
    image: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,

    /// Number of pattern classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,

    /// Images per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,

    /// Rendered image side length in pixels.
    #[arg(long, default_value_t = 64)]
    img_size: usize,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.base();
    args.common.apply_file_and_overrides(&mut cfg)?;
    if let Some(data) = &args.data {
        cfg.data_root = data.display().to_string();
    }
    if let Some(r) = args.mask_ratio {
        cfg.mask_ratio = r;
    }
    cfg.validate()?;
    if cfg.data_root.is_empty() {
        return Err(Error::Config(
            "no dataset: pass --data DIR or --set data_root=DIR".into(),
        ));
    }
    args.common.write_resolved(&cfg)?;

    let dataset = load_dataset(Path::new(&cfg.data_root), None)?;
    let (images, _) = dataset.split(Split::Train);
    println!(
        "training on {} images ({} classes) from {}",
        images.len(),
        dataset.manifest.classes.len(),
        cfg.data_root
    );
    let out = distill::train(&images, &cfg, &args.common.run_dir)?;
    if let Some(last) = out.metrics.last() {
        println!("steps={} final_loss={:.6}", last.step, last.loss);
    }
    println!("checkpoint={}", out.final_checkpoint.display());
    Ok(())
}

/// Base config for checkpoint consumers: the embedded config, then the
/// caller's file/overrides on top, with an architecture guard.
fn resolve_over_checkpoint(
    common: &Common,
    ckpt_cfg: &RunConfig,
    force: bool,
) -> Result<RunConfig> {
    let mut cfg = ckpt_cfg.clone();
    common.apply_file_and_overrides(&mut cfg)?;
    cfg.validate()?;
    if !compatible(ckpt_cfg, &cfg) {
        if force {
            log::warn!("architecture overrides differ from the checkpoint; continuing (--force)");
        } else {
            return Err(Error::Checkpoint(
                "overrides change the model architecture; pass --force to load anyway".into(),
            ));
        }
    }
    Ok(cfg)
}

fn eval_banks(
    cfg: &RunConfig,
    state: &distill::TrainState,
) -> Result<(dinomask::eval::FeatureBank, dinomask::eval::FeatureBank)> {
    if cfg.data_root.is_empty() {
        return Err(Error::Config(
            "no dataset: pass --data DIR or --set data_root=DIR".into(),
        ));
    }
    let dataset = load_dataset(Path::new(&cfg.data_root), None)?;
    let (train_imgs, train_labels) = dataset.split(Split::Train);
    let (mut test_imgs, mut test_labels) = dataset.split(Split::Test);
    if test_imgs.is_empty() {
        log::warn!("dataset has no test split; evaluating on the train split");
        test_imgs = train_imgs.clone();
        test_labels = train_labels.clone();
    }
    let vit_cfg = cfg.vit();
    let train_bank =
        extract_features(&state.teacher, &vit_cfg, &train_imgs, &train_labels, "train")?;
    let test_bank = extract_features(&state.teacher, &vit_cfg, &test_imgs, &test_labels, "test")?;
    Ok((train_bank, test_bank))
}

fn cmd_eval(args: &EvalArgs, kind: &str) -> Result<()> {
    let (state, ckpt_cfg) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = resolve_over_checkpoint(&args.common, &ckpt_cfg, args.force)?;
    if let Some(data) = &args.data {
        cfg.data_root = data.display().to_string();
    }
    args.common.write_resolved(&cfg)?;
    let (train_bank, test_bank) = eval_banks(&cfg, &state)?;

    let (top1, detail) = match kind {
        "knn" => {
            let k = cfg.knn_k.min(train_bank.len());
            let preds = knn_classify(&train_bank, &test_bank, k, cfg.knn_temp)?;
            let acc = top1_accuracy(&preds, &test_bank.labels)?;
            (acc, format!("\"k\": {k}, \"temp\": {}", cfg.knn_temp))
        }
        _ => {
            let probe_cfg = ProbeConfig {
                epochs: cfg.probe_epochs,
                lr: cfg.probe_lr,
                momentum: cfg.probe_momentum,
                batch: 64,
                seed: cfg.seed,
            };
            let (_, acc) = linear_probe(&train_bank, &test_bank, &probe_cfg)?;
            (
                acc,
                format!(
                    "\"epochs\": {}, \"lr\": {}, \"momentum\": {}",
                    probe_cfg.epochs, probe_cfg.lr, probe_cfg.momentum
                ),
            )
        }
    };
    println!("metric={kind} top1={top1:.4}");
    let summary = format!(
        "{{\"metric\": \"{kind}\", \"top1\": {top1:.6}, \"n_train\": {}, \"n_test\": {}, \
         \"checkpoint\": \"{}\", {detail}}}\n",
        train_bank.len(),
        test_bank.len(),
        args.checkpoint.display()
    );
    let path = args.common.run_dir.join(format!("eval_{kind}.json"));
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn cmd_mask_preview(args: &MaskPreviewArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(r) = args.mask_ratio {
        cfg.mask_ratio = r;
    }
    cfg.validate()?;
    args.common.write_resolved(&cfg)?;
    let image = load_image(&args.image)?;
    let seed = derive_seed(cfg.seed, "preview", 0);
    let paths = viz::mask_preview(&image, &cfg.views(), seed, &args.common.run_dir)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_attn_viz(args: &AttnVizArgs) -> Result<()> {
    let (state, ckpt_cfg) = load_checkpoint(&args.checkpoint)?;
    let cfg = resolve_over_checkpoint(&args.common, &ckpt_cfg, false)?;
    args.common.write_resolved(&cfg)?;
    let vit_cfg = cfg.vit();
    let image = load_image(&args.image)?;
    let mut view = dinomask::views::eval_view(&image, vit_cfg.img_size_global)?;
    normalize_image(&mut view);
    let batch = stack(&[&view])?;
    let mut tape = Tape::<f32>::new();
    let staged = stage_model(&mut tape, &state.teacher);
    let out = backbone_forward(&mut tape, &staged, &vit_cfg, &batch)?;
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let paths = viz::export_attention(
        &out.last_attn,
        vit_cfg.img_size_global,
        vit_cfg.patch_size,
        &args.common.run_dir,
        &stem,
    )?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    args.common.write_resolved(&cfg)?;
    let manifest = gen_synth(
        &args.common.run_dir,
        args.classes,
        args.per_class,
        args.img_size,
        cfg.seed,
    )?;
    let n_test = manifest.indices(Split::Test).len();
    println!(
        "wrote {} images ({} classes, {} test) to {}",
        manifest.len(),
        manifest.classes.len(),
        n_test,
        args.common.run_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::EvalKnn(a) => cmd_eval(a, "knn"),
        Cmd::EvalLinear(a) => cmd_eval(a, "linear"),
        Cmd::MaskPreview(a) => cmd_mask_preview(a),
        Cmd::AttnViz(a) => cmd_attn_viz(a),
        Cmd::GenSynth(a) => cmd_gen_synth(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
