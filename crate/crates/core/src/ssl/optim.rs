//! SGD with momentum and an optional LARS trust ratio, Adam with decoupled
//! weight decay, and the warmup/cosine schedule.

use std::collections::BTreeMap;

use crate::diffcore::{ParamStore, Scalar};

use super::{OptimizerKind, SslConfig};

/// Learning rate at 0-based `step` of `total` steps: linear warmup to the
/// peak over `warmup` steps, then cosine decay to `cfg.final_lr` at the last
/// step.
pub fn learning_rate(cfg: &SslConfig, step: usize, warmup: usize, total: usize) -> f64 {
    let peak = cfg.peak_lr();
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).saturating_sub(1);
    if span == 0 {
        return peak;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.final_lr + (peak - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Momentum buffers keyed by parameter name. Rank-1 parameters (biases and
/// norm gains) are exempt from weight decay and the trust ratio.
pub struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    lars: Option<f64>,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: &SslConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lars: cfg.lars.then_some(cfg.lars_eta),
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients held in `store`, skipping
    /// buffers and any name listed as frozen by `skip`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, skip: impl Fn(&str) -> bool) {
        let m = T::of(self.momentum);
        for (name, param, grad) in store.iter_with_grads_mut() {
            if ParamStore::<T>::is_buffer(name) || skip(name) {
                continue;
            }
            let matrix = param.rank() > 1;
            let wd = if matrix { self.weight_decay } else { 0.0 };
            let mut scale = lr;
            if let (Some(eta), true) = (self.lars, matrix) {
                let pn = param.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
                let gn = grad.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
                if pn > 0.0 && gn > 0.0 {
                    scale *= eta * pn / (gn + wd * pn);
                }
            }
            let wd = T::of(wd);
            let scale = T::of(scale);
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); param.numel()]);
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p -= scale * *v;
            }
        }
    }
}

/// Adam with bias correction and decoupled weight decay (skipped for rank-1
/// parameters).
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, skip: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step = T::of(lr / c1);
        let c2 = T::of(c2);
        for (name, param, grad) in store.iter_with_grads_mut() {
            if ParamStore::<T>::is_buffer(name) || skip(name) {
                continue;
            }
            let decay = T::of(if param.rank() > 1 { lr * self.weight_decay } else { 0.0 });
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); param.numel()], vec![T::zero(); param.numel()]));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= decay * *p;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// The optimizer selected by [`SslConfig::optimizer`].
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &SslConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(cfg)),
            OptimizerKind::Adamw => Self::Adam(Adam::new(cfg.weight_decay)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, skip: impl Fn(&str) -> bool) {
        match self {
            Self::Sgd(o) => o.step(store, lr, skip),
            Self::Adam(o) => o.step(store, lr, skip),
        }
    }
}
