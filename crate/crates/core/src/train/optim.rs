use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("adamw_step: missing gradients ({grads} buffers for {params} parameters)")]
    MissingGrads { params: usize, grads: usize },
    #[error("adamw_step: gradient for `{name}` has {got} elements, expected {expected}")]
    GradShape {
        name: String,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_frac * total_steps as f64).round() as usize).min(total_steps);
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub schedule: Schedule,
    pub hyper: AdamWHyper,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>, schedule: Schedule, hyper: AdamWHyper) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            schedule,
            hyper,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step as usize)
    }
}

/// Decoupled-weight-decay Adam with bias correction. Decay touches only
/// parameters flagged `decay`; the learning rate comes from the schedule.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimState<T>,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::MissingGrads {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for id in params.ids().collect::<Vec<_>>() {
        let (n, name) = {
            let p = params.get(id);
            (p.value.numel(), p.name.clone())
        };
        if grads.get(id).len() != n {
            return Err(OptimError::GradShape {
                name,
                got: grads.get(id).len(),
                expected: n,
            });
        }
    }

    let lr = state.current_lr();
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - h.beta1.powi(t));
    let bc2 = T::lit(1.0 - h.beta2.powi(t));
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (one, eps, lr_t) = (T::one(), T::lit(h.eps), T::lit(lr));
    for id in params.ids().collect::<Vec<_>>() {
        let k = id.index();
        let p = params.get_mut(id);
        let decay = if p.decay { T::lit(lr * h.weight_decay) } else { T::zero() };
        let g = grads.get(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            *w = *w - decay * *w;
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
