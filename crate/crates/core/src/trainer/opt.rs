//! Optimizer building blocks: warmup/milestone learning-rate schedule, AdamW
//! with decoupled weight decay, and a running parameter EMA.

use crate::nn::Params;
use crate::util::Float;

/// Linear warmup to `base`, then ×`factor` after each milestone step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub milestones: Vec<u64>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            warmup_steps: 100,
            milestones: vec![15_000, 18_000],
            decay_factor: 0.1,
        }
    }
}

pub fn lr_at(step: u64, schedule: &LrSchedule) -> f64 {
    let ramp = if schedule.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / schedule.warmup_steps as f64).min(1.0)
    };
    let decays = schedule.milestones.iter().filter(|&&m| step > m).count() as i32;
    schedule.base * ramp * schedule.decay_factor.powi(decays)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second-moment state, flat across the parameter struct's tensors in
/// entry order.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }
}

/// One decoupled-weight-decay adaptive update. `lr = 0` leaves parameters
/// untouched while the moments still advance.
pub fn adamw_step<F: Float, P: Params<F>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.t += 1;
    let b1 = F::c(cfg.beta1);
    let b2 = F::c(cfg.beta2);
    let eps = F::c(cfg.eps);
    let lr_f = F::c(lr);
    let wd = F::c(cfg.weight_decay);
    let bc1 = F::c(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = F::c(1.0 - cfg.beta2.powi(state.t as i32));
    let one = F::one();

    let mut off = 0usize;
    let grad_entries = grads.entries();
    for ((_, mut p), (_, g)) in params.entries_mut().into_iter().zip(grad_entries) {
        for (pi, &gi) in p.iter_mut().zip(g.iter()) {
            let m = b1 * state.m[off] + (one - b1) * gi;
            let v = b2 * state.v[off] + (one - b2) * gi * gi;
            state.m[off] = m;
            state.v[off] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *pi = *pi - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
            off += 1;
        }
    }
    debug_assert_eq!(off, state.m.len(), "adam state size mismatch");
}

/// `ema ← decay·ema + (1−decay)·params`.
pub fn ema_update<F: Float, P: Params<F>>(ema: &mut P, params: &P, decay: f64) {
    let d = F::c(decay);
    let one = F::one();
    let src = params.entries();
    for ((_, mut e), (_, p)) in ema.entries_mut().into_iter().zip(src) {
        ndarray::Zip::from(&mut e)
            .and(&p)
            .for_each(|e, &p| *e = d * *e + (one - d) * p);
    }
}
