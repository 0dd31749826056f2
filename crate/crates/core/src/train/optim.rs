use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamKind};

/// Adam moment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Linear warmup followed by cosine decay.
///
/// Over `total` optimizer steps, the first `floor(warmup_frac * total)`
/// ramp linearly up to `peak`; the remaining steps follow a half cosine
/// from `peak` at the first post-warmup step down to 0 at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64) -> Self {
        let warmup = ((warmup_frac * total as f64).floor() as usize).min(total.saturating_sub(1));
        Self { peak, total, warmup }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup + 1);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay applied only to linear-layer weight
/// matrices.
#[derive(Clone, Debug)]
pub struct AdamW {
    settings: AdamSettings,
    weight_decay: f64,
    decay: Vec<bool>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u32,
}

impl AdamW {
    pub fn new(params: &ModelParams, settings: AdamSettings, weight_decay: f64) -> Self {
        let decay = params.specs().iter().map(|s| s.kind == ParamKind::Weight).collect();
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { settings, weight_decay, decay, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to tensor `i`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[&[f32]], lr: f64) {
        self.step += 1;
        let AdamSettings { beta1, beta2, eps } = self.settings;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = eps as f32;
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let shrink = if self.decay[i] { (1.0 - lr * self.weight_decay) as f32 } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * shrink - step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
