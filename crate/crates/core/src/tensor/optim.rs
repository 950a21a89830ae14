//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! per-epoch cosine-restart learning-rate schedule.

use super::{Real, Tensor};

/// Cosine schedule that restarts at the top of every epoch:
/// `lr(s) = min + 0.5 (base - min) (1 + cos(pi * s / steps_per_epoch))`
/// with `s = step mod steps_per_epoch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineRestartSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub steps_per_epoch: usize,
}

impl CosineRestartSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        assert!(self.steps_per_epoch > 0, "steps_per_epoch must be positive");
        let s = (step % self.steps_per_epoch) as f64 / self.steps_per_epoch as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// AdamW over a fixed parameter list. Moments are kept in f64 regardless of
/// the parameter dtype; a parameter with no gradient this step is treated as
/// having a zero gradient (weight decay still applies).
pub struct AdamW<T: Real> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub cfg: AdamWConfig,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: Vec<Tensor<T>>, cfg: AdamWConfig) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW { params, m, v, t: 0, cfg }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update with the given learning rate. Returns the global gradient
    /// norm before clipping.
    pub fn step(&mut self, lr: f64) -> f64 {
        self.t += 1;
        let grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| {
                p.grad()
                    .map(|g| g.iter().map(|&x| x.to_f64()).collect())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            p.with_values_mut(|w| {
                for j in 0..w.len() {
                    let gj = g[j] * scale;
                    m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                    v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let wj = w[j].to_f64();
                    let step = lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * wj);
                    w[j] = T::from_f64(wj - step);
                }
            });
        }
        norm
    }
}
