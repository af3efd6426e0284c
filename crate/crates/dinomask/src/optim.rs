//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! cosine schedules used for learning rate, weight decay, and teacher EMA.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam moment hyperparameters. The update reads lr/wd per step from the
/// schedules instead, so they are not stored here.
#[derive(Debug, Clone, Copy)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers and step count.
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One AdamW update: decoupled decay `p *= 1 - lr*wd`, then the
/// bias-corrected moment step. With `lr = 0` the parameter is untouched
/// bit-for-bit (moments still advance).
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    state: &mut OptimState<T>,
    lr: f64,
    wd: f64,
    hyper: &AdamWHyper,
) -> Result<()> {
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(Error::InvalidArgument(format!(
            "adamw_step: param has {} elements, grad {}, state {}",
            param.numel(),
            grad.len(),
            state.m.len()
        )));
    }
    if lr < 0.0 || wd < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "adamw_step: lr and wd must be non-negative, got lr={lr} wd={wd}"
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one_m_b1 = T::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = T::from_f64(1.0 - hyper.beta2);
    let c1 = T::from_f64(1.0 / (1.0 - hyper.beta1.powi(net_pow(state.t))));
    let c2 = T::from_f64(1.0 / (1.0 - hyper.beta2.powi(net_pow(state.t))));
    let eps = T::from_f64(hyper.eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(1.0 - lr * wd);
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + one_m_b1 * g;
        state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
        if lr != 0.0 {
            let mhat = state.m[i] * c1;
            let vhat = state.v[i] * c2;
            data[i] = data[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

fn net_pow(t: u64) -> i32 {
    t.min(i32::MAX as u64) as i32
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip global norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let f = v.as_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Cosine interpolation `final + (base - final) * (1 + cos(pi t / T)) / 2`
/// with exact endpoints. `t > T` clamps to `final` (warned once per process).
pub fn cosine_interp(base: f64, fin: f64, t: u64, total: u64) -> f64 {
    if t == 0 {
        return base;
    }
    if t >= total {
        if t > total {
            static WARNED: std::sync::Once = std::sync::Once::new();
            WARNED.call_once(|| log::warn!("cosine_interp: step {t} past horizon {total}, clamping"));
        }
        return fin;
    }
    fin + (base - fin) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

/// Scalar schedules over global steps: linear LR warmup into cosine decay,
/// cosine weight decay, cosine teacher-EMA momentum.
#[derive(Debug, Clone)]
pub struct Schedules {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub wd_base: f64,
    pub wd_final: f64,
    pub ema_base: f64,
    pub ema_final: f64,
}

impl Schedules {
    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            return self.peak_lr * t as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1);
        cosine_interp(self.peak_lr, self.min_lr, t - self.warmup_steps, span)
    }

    pub fn wd_at(&self, t: u64) -> f64 {
        cosine_interp(self.wd_base, self.wd_final, t, self.total_steps.max(1))
    }

    pub fn ema_lambda_at(&self, t: u64) -> f64 {
        cosine_interp(self.ema_base, self.ema_final, t, self.total_steps.max(1))
    }
}
