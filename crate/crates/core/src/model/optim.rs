//! Decoupled-weight-decay Adam with warmup + cosine learning rate.

use super::{Tensor, ToyModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_ratio: f64,
    pub total_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            total_steps: 1000,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
    /// `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.peak_lr * step as f64 / warmup as f64;
        }
        let span = self.total_steps.saturating_sub(warmup);
        if span == 0 {
            return self.peak_lr;
        }
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ToyModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads
        .named_blocks()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|&g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for (_, t) in grads.named_blocks_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub m: ToyModelParams<T>,
    pub v: ToyModelParams<T>,
    /// Updates applied so far.
    pub t: u64,
}

/// Biases, gains and embeddings are not decayed.
fn decays(name: &str, t: &Tensor<impl Scalar>) -> bool {
    t.shape.len() == 2 && !name.ends_with("embedding") && name != "nhot_projection"
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &ToyModelParams<T>) -> Self {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Clips, then applies one update at the learning rate of step `self.t`.
    /// Returns `(lr, grad_norm_before_clip)`.
    pub fn step(
        &mut self,
        params: &mut ToyModelParams<T>,
        grads: &mut ToyModelParams<T>,
    ) -> (f64, f64) {
        let norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(grads, c),
            None => clip_global_norm(grads, f64::INFINITY),
        };
        let lr = self.config.lr_at(self.t);
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps, wd) = (T::c(lr), T::c(c.eps), T::c(c.weight_decay));

        let blocks = params
            .named_blocks_mut()
            .into_iter()
            .zip(grads.named_blocks())
            .zip(self.m.named_blocks_mut())
            .zip(self.v.named_blocks_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in blocks {
            let decay = c.weight_decay > 0.0 && decays(&name, p);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if decay {
                    upd += wd * p.data[i];
                }
                p.data[i] -= lr_t * upd;
            }
        }
        (lr, norm)
    }
}
