//! Self-distillation objective and training loop.
//!
//! The teacher sees the two clean global crops; the student sees the two
//! masked globals plus all clean locals. Teacher outputs are centered and
//! sharpened off-tape (no gradient), student log-probabilities stay on tape.
//! Each step: loss -> backward -> global-norm clip -> AdamW -> EMA teacher
//! -> center update, with the loss always using the pre-update center.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, clip_global_norm, AdamWHyper, OptimState, Schedules};
use crate::rng::{checksum_f32, derive_seed, rng_from_seed, sample_seed};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{stack, Scalar, Tensor};
use crate::views::{make_views, ViewSet};
use crate::vit::{backbone_forward, collect_grads, head_forward, stage_model, DinoParams};

/// Running mean of teacher logits, subtracted before sharpening.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub c: Vec<f64>,
    pub momentum: f64,
}

impl Center {
    pub fn new(k: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "center momentum {momentum} outside [0, 1]"
            )));
        }
        Ok(Self {
            c: vec![0.0; k],
            momentum,
        })
    }
}

/// All (teacher view, student view) pairs except same-index globals.
/// Teacher views index the first `n_teacher` student views as globals.
pub fn dino_pairs(n_teacher: usize, n_student: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n_teacher * n_student);
    for i in 0..n_teacher {
        for j in 0..n_student {
            if j != i {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Centered, sharpened teacher distribution in f64: softmax((t - c)/tau).
fn teacher_probs<T: Scalar>(logits: &Tensor<T>, center: &Center, tau_t: f64) -> Tensor<f64> {
    let k = logits.last_dim();
    let rows = logits.numel() / k;
    let mut out = vec![0.0f64; rows * k];
    for r in 0..rows {
        let row = &logits.data()[r * k..(r + 1) * k];
        let dst = &mut out[r * k..(r + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            dst[i] = (row[i].as_f64() - center.c[i]) / tau_t;
            max = max.max(dst[i]);
        }
        let mut sum = 0.0;
        for v in dst.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(out, vec![rows, k]).expect("teacher_probs shape")
}

/// Mean per-row Shannon entropy of a `[N, K]` probability tensor.
pub fn mean_entropy(probs: &Tensor<f64>) -> f64 {
    let k = probs.last_dim();
    let rows = probs.numel() / k;
    let mut total = 0.0;
    for row in probs.data().chunks(k) {
        for &p in row {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows as f64
}

/// Loss node plus off-tape diagnostics.
pub struct DinoLossInfo {
    /// Scalar loss on the student tape.
    pub loss: NodeId,
    pub value: f64,
    pub pairs: Vec<(usize, usize)>,
    /// Per-pair cross-entropy, batch-averaged, aligned with `pairs`.
    pub pair_losses: Vec<f64>,
    /// Centered/sharpened teacher distributions per teacher view, f64.
    pub teacher_probs: Vec<Tensor<f64>>,
}

/// Cross-view cross-entropy with the standard pairing rule
/// (`dino_pairs`): mean over pairs of batch-mean H(p_teacher, p_student).
pub fn dino_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &[Tensor<T>],
    student_logits: &[NodeId],
    tau_t: f64,
    tau_s: f64,
    center: &Center,
) -> Result<DinoLossInfo> {
    let pairs = dino_pairs(teacher_logits.len(), student_logits.len());
    dino_loss_with_pairs(tape, teacher_logits, student_logits, tau_t, tau_s, center, pairs)
}

/// Same objective over an explicit pair list (used by tests and probes).
pub fn dino_loss_with_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &[Tensor<T>],
    student_logits: &[NodeId],
    tau_t: f64,
    tau_s: f64,
    center: &Center,
    pairs: Vec<(usize, usize)>,
) -> Result<DinoLossInfo> {
    if !(tau_t > 0.0) || !(tau_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperatures must be positive, got teacher {tau_t}, student {tau_s}"
        )));
    }
    let first = teacher_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("dino_loss: no teacher views".into()))?;
    let (b, k) = (first.shape()[0], first.last_dim());
    if center.c.len() != k {
        return Err(Error::InvalidArgument(format!(
            "center length {} does not match K={k}",
            center.c.len()
        )));
    }
    for t in teacher_logits {
        if t.shape() != [b, k] {
            return Err(Error::shape("dino_loss", format!("[{b}, {k}]"), format!("{:?}", t.shape())));
        }
    }
    for &id in student_logits {
        if tape.shape(id) != [b, k] {
            return Err(Error::shape(
                "dino_loss",
                format!("[{b}, {k}]"),
                format!("{:?}", tape.shape(id)),
            ));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dino_loss: empty pair list".into()));
    }
    for &(i, j) in &pairs {
        if i >= teacher_logits.len() || j >= student_logits.len() {
            return Err(Error::InvalidArgument(format!(
                "dino_loss: pair ({i}, {j}) out of range"
            )));
        }
    }

    let probs: Vec<Tensor<f64>> = teacher_logits
        .iter()
        .map(|t| teacher_probs(t, center, tau_t))
        .collect();

    // All student views share one log-softmax: concat rows view-major,
    // scale by 1/tau_s, log-softmax per row.
    let mut cat = student_logits[0];
    for &id in &student_logits[1..] {
        cat = tape.concat_rows(cat, id)?;
    }
    let scaled = tape.scale(cat, 1.0 / tau_s)?;
    let ls = tape.log_softmax(scaled)?;

    // The loss is linear in the student log-probs, so it folds into a
    // single constant coefficient tensor: -p_t / (n_pairs * B) summed over
    // the pairs that hit each student view.
    let n_pairs = pairs.len() as f64;
    let mut coeff = vec![0.0f64; student_logits.len() * b * k];
    for &(i, j) in &pairs {
        let p = probs[i].data();
        for bb in 0..b {
            for kk in 0..k {
                coeff[(j * b + bb) * k + kk] -= p[bb * k + kk] / (n_pairs * b as f64);
            }
        }
    }
    let coeff_t = Tensor::from_vec(
        coeff.iter().map(|&x| T::from_f64(x)).collect(),
        vec![student_logits.len() * b, k],
    )?;
    let coeff_node = tape.constant(&coeff_t);
    let prod = tape.mul(ls, coeff_node)?;
    let loss = tape.sum_all(prod)?;
    let value = tape.value(loss)[0].as_f64();

    let ls_val = tape.value(ls).to_vec();
    let pair_losses = pairs
        .iter()
        .map(|&(i, j)| {
            let p = probs[i].data();
            let mut acc = 0.0;
            for bb in 0..b {
                for kk in 0..k {
                    acc -= p[bb * k + kk] * ls_val[(j * b + bb) * k + kk].as_f64();
                }
            }
            acc / b as f64
        })
        .collect();

    Ok(DinoLossInfo {
        loss,
        value,
        pairs,
        pair_losses,
        teacher_probs: probs,
    })
}

/// `c' = m*c + (1-m)*mean` over every teacher logit row of the step.
/// Call after the loss has consumed the old center.
pub fn update_center<T: Scalar>(center: &mut Center, teacher_logits: &[Tensor<T>]) -> Result<()> {
    let k = center.c.len();
    let mut mean = vec![0.0f64; k];
    let mut rows = 0usize;
    for t in teacher_logits {
        if t.last_dim() != k {
            return Err(Error::shape(
                "update_center",
                format!("[.., {k}]"),
                format!("{:?}", t.shape()),
            ));
        }
        for row in t.data().chunks(k) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v.as_f64();
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("update_center: no logit rows".into()));
    }
    let m = center.momentum;
    for (c, s) in center.c.iter_mut().zip(&mean) {
        *c = m * *c + (1.0 - m) * (s / rows as f64);
    }
    Ok(())
}

/// `theta_t <- lambda*theta_t + (1-lambda)*theta_s` for every parameter.
/// lambda == 1 leaves the teacher bit-identical (no writes).
pub fn ema_update<T: Scalar>(
    teacher: &mut DinoParams<T>,
    student: &DinoParams<T>,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("EMA lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let l = T::from_f64(lambda);
    let one_minus = T::from_f64(1.0 - lambda);
    let snap = student.named();
    for ((tname, tt), (sname, st)) in teacher.named_mut().into_iter().zip(snap) {
        if tname != sname || tt.shape() != st.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{sname} {:?}", st.shape()),
                format!("{tname} {:?}", tt.shape()),
            ));
        }
        for (a, s) in tt.data_mut().iter_mut().zip(st.data()) {
            *a = l * *a + one_minus * *s;
        }
    }
    Ok(())
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: DinoParams<f32>,
    pub teacher: DinoParams<f32>,
    /// Per-parameter AdamW state, aligned with `student.named()` order.
    pub opt: Vec<OptimState<f32>>,
    pub center: Center,
    /// Completed optimization steps.
    pub step: u64,
    /// Run seed; all stream seeds derive from it, so this is the whole
    /// RNG state.
    pub seed: u64,
}

impl TrainState {
    /// Fresh state: student from seeded init, teacher an exact copy.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let vit_cfg = cfg.vit();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "init", 0));
        let mut student = DinoParams::<f32>::init(&vit_cfg, &mut rng)?;
        student.set_requires_grad(true);
        let mut teacher = student.clone();
        teacher.set_requires_grad(false);
        let opt = student
            .named()
            .iter()
            .map(|(_, t)| OptimState::zeros(t.numel()))
            .collect();
        let center = Center::new(cfg.head_out_dim, cfg.center_momentum)?;
        Ok(Self {
            student,
            teacher,
            opt,
            center,
            step: 0,
            seed: cfg.seed,
        })
    }
}

/// One metrics.tsv row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step\tepoch\tloss\tlr\twd\tlambda\tgrad_norm";

impl StepMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.loss, self.lr, self.wd, self.lambda, self.grad_norm
        )
    }
}

fn batched_views(batch: &[ViewSet]) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let n_locals = batch[0].student_locals.len();
    let mut teacher_in = Vec::with_capacity(2);
    let mut student_in = Vec::with_capacity(2 + n_locals);
    for v in 0..2 {
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.teacher_globals[v]).collect();
        teacher_in.push(stack(&imgs)?);
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.student_globals[v]).collect();
        student_in.push(stack(&imgs)?);
    }
    for v in 0..n_locals {
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.student_locals[v]).collect();
        student_in.push(stack(&imgs)?);
    }
    Ok((teacher_in, student_in))
}

/// One optimization step over a batch of view sets.
pub fn train_step(
    state: &mut TrainState,
    batch: &[ViewSet],
    epoch: u64,
    cfg: &RunConfig,
    sch: &Schedules,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("train_step: empty batch".into()));
    }
    let t = state.step;
    let vit_cfg = cfg.vit();
    let (teacher_in, student_in) = batched_views(batch)?;

    // Teacher forward on clean globals; parameters are staged without
    // requires_grad, so the tape records values only.
    let mut teacher_logits = Vec::with_capacity(teacher_in.len());
    {
        let mut ttape = Tape::<f32>::new();
        let staged = stage_model(&mut ttape, &state.teacher);
        for img in &teacher_in {
            let out = backbone_forward(&mut ttape, &staged, &vit_cfg, img)?;
            let logits = head_forward(&mut ttape, &staged, out.cls)?;
            teacher_logits.push(ttape.tensor(logits));
        }
    }

    // Student forward on masked globals + clean locals, one shared tape.
    let mut tape = Tape::<f32>::new();
    let staged = stage_model(&mut tape, &state.student);
    let mut student_nodes = Vec::with_capacity(student_in.len());
    for img in &student_in {
        let out = backbone_forward(&mut tape, &staged, &vit_cfg, img)?;
        student_nodes.push(head_forward(&mut tape, &staged, out.cls)?);
    }

    let info = dino_loss(
        &mut tape,
        &teacher_logits,
        &student_nodes,
        cfg.teacher_temp,
        cfg.student_temp,
        &state.center,
    )?;
    if !info.value.is_finite() {
        let mut sums = Vec::new();
        for (i, v) in teacher_in.iter().enumerate() {
            sums.push(format!("teacher_view{i}={:016x}", checksum_f32(v.data())));
        }
        for (i, v) in student_in.iter().enumerate() {
            sums.push(format!("student_view{i}={:016x}", checksum_f32(v.data())));
        }
        return Err(Error::NonFinite(format!(
            "loss {} at step {t}; input checksums: {}",
            info.value,
            sums.join(" ")
        )));
    }

    tape.backward(info.loss)?;
    let mut grads = collect_grads(&tape, &staged);
    drop(tape);

    let names: Vec<String> = state.student.named().iter().map(|(n, _)| n.clone()).collect();
    if epoch < cfg.freeze_last_layer_epochs {
        for (name, g) in names.iter().zip(grads.iter_mut()) {
            if name == "head.proto" {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = sch.lr_at(t);
    let wd = sch.wd_at(t);
    let lambda = sch.ema_lambda_at(t);
    let hyper = AdamWHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    for (((name, param), g), opt) in state
        .student
        .named_mut()
        .into_iter()
        .zip(&grads)
        .zip(state.opt.iter_mut())
    {
        let wd_used = if DinoParams::<f32>::decays(&name) { wd } else { 0.0 };
        adamw_step(param, g, opt, lr, wd_used, &hyper)?;
    }
    ema_update(&mut state.teacher, &state.student, lambda)?;
    update_center(&mut state.center, &teacher_logits)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        epoch,
        loss: info.value,
        lr,
        wd,
        lambda,
        grad_norm,
    })
}

/// Training artifacts and the final state.
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Full training run over raw `[3, H, W]` images in `[0, 1]`.
///
/// Writes `config.resolved`, `metrics.tsv`, periodic checkpoints, and
/// `final.ckpt` into `run_dir`. Epochs shuffle deterministically from the
/// run seed; trailing partial batches are dropped.
pub fn train(images: &[Tensor<f32>], cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let spe = images.len() / cfg.batch_size;
    if spe == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            images.len()
        )));
    }
    let total = if cfg.total_steps > 0 {
        cfg.total_steps
    } else {
        cfg.epochs * spe as u64
    };
    let sch = cfg.schedules(total);

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let resolved = run_dir.join("config.resolved");
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let metrics_path = run_dir.join("metrics.tsv");
    let mut mf = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(mf, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut state = TrainState::new(cfg)?;
    let view_cfg = cfg.views();
    let mut metrics = Vec::new();
    let mut epoch: u64 = 0;
    while state.step < total {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "shuffle", epoch)));
        for chunk in order.chunks_exact(cfg.batch_size) {
            if state.step >= total {
                break;
            }
            let batch: Vec<ViewSet> = chunk
                .iter()
                .map(|&idx| {
                    make_views(&images[idx], &view_cfg, sample_seed(cfg.seed, epoch, idx as u64))
                })
                .collect::<Result<_>>()?;
            let m = train_step(&mut state, &batch, epoch, cfg, &sch)?;
            writeln!(mf, "{}", m.tsv_line()).map_err(|e| Error::io(&metrics_path, e))?;
            metrics.push(m);
        }
        epoch += 1;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && state.step < total {
            let path = run_dir.join(format!("epoch_{epoch:04}.ckpt"));
            checkpoint::save_checkpoint(&state, cfg, &path)?;
        }
        if log::log_enabled!(log::Level::Info) {
            if let Some(m) = metrics.last() {
                log::info!(
                    "epoch {epoch} done: step {} loss {:.4} lr {:.2e}",
                    m.step,
                    m.loss,
                    m.lr
                );
            }
        }
    }
    mf.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let final_checkpoint = run_dir.join("final.ckpt");
    checkpoint::save_checkpoint(&state, cfg, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        metrics,
        final_checkpoint,
    })
}
