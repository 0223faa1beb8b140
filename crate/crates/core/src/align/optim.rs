//! AdamW with a linear-warmup, cosine-decay learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AlignError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(
        peak_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
        weight_decay: f64,
        epochs: usize,
        seed: u64,
    ) -> Result<Self, AlignError> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(AlignError::InvalidSchedule(format!(
                "need 0 < warmup_steps ({warmup_steps}) <= total_steps ({total_steps})"
            )));
        }
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(AlignError::InvalidSchedule(format!("bad peak lr {peak_lr}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(AlignError::InvalidSchedule(format!(
                "bad weight decay {weight_decay}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
            weight_decay,
            epochs,
            seed,
        })
    }
}

/// Learning rate at `step`: linear from 0 to the peak over the warmup, then
/// a half cosine down to 0 at `total_steps`. Steps past the end are clamped.
pub fn lr_at(step: usize, sched: &TrainSchedule) -> f64 {
    let step = step.min(sched.total_steps);
    if step <= sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    let decay = (sched.total_steps - sched.warmup_steps) as f64;
    let progress = (step - sched.warmup_steps) as f64 / decay;
    0.5 * sched.peak_lr * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
    }
}
