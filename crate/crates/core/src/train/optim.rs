//! Momentum SGD, step-decay learning rate and gradient clipping.

use crate::error::{Error, Result};
use crate::layers::Parameters;

/// `lr = max(init · factor^⌊step / every⌋, floor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub init: f64,
    pub factor: f64,
    pub every: usize,
    pub floor: f64,
}

impl StepDecay {
    /// Decays every `⌊fraction · steps_per_epoch⌋` steps (at least 1).
    pub fn per_epoch_fraction(
        init: f64,
        factor: f64,
        fraction: f64,
        steps_per_epoch: usize,
        floor: f64,
    ) -> Self {
        StepDecay {
            init,
            factor,
            every: ((fraction * steps_per_epoch as f64).floor() as usize).max(1),
            floor,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let k = (step / self.every).min(i32::MAX as usize) as i32;
        (self.init * self.factor.powi(k)).max(self.floor)
    }
}

/// Heavy-ball update `v ← μ·v − lr·(g + l2·w)`, `w ← w + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub momentum: f64,
    pub l2: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(momentum: f64, l2: f64) -> Self {
        Momentum {
            momentum,
            l2,
            velocity: Vec::new(),
        }
    }

    /// Updates one parameter slice; `slot` identifies its velocity buffer.
    pub fn update(&mut self, slot: usize, w: &mut [f64], g: &[f64], lr: f64) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != w.len() {
            *v = vec![0.0; w.len()];
        }
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = self.momentum * *vi - lr * (gi + self.l2 * *wi);
            *wi += *vi;
        }
    }

    /// One step over every trainable parameter of `model`, using the
    /// gradients it holds scaled by `grad_scale`.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, lr: f64, grad_scale: f64) {
        let mut slot = 0;
        model.visit_params_mut(&mut |_, role, t| {
            if !role.trainable() {
                return;
            }
            let g: Vec<f64> = match t.grad() {
                Some(g) => g.iter().map(|v| v * grad_scale).collect(),
                None => vec![0.0; t.len()],
            };
            self.update(slot, t.data_mut(), &g, lr);
            slot += 1;
        });
    }
}

/// Global L2 norm of all trainable gradients; errors on a non-finite value.
pub fn grad_norm<P: Parameters + ?Sized>(model: &P) -> Result<f64> {
    let mut sq = 0.0;
    let mut bad = None;
    model.visit_params(&mut |name, role, t| {
        if let (true, Some(g)) = (role.trainable(), t.grad()) {
            for v in g {
                if !v.is_finite() && bad.is_none() {
                    bad = Some(name.to_string());
                }
                sq += v * v;
            }
        }
    });
    match bad {
        Some(name) => Err(Error::Diverged(format!("non-finite gradient in {name}"))),
        None => Ok(sq.sqrt()),
    }
}

/// Scale that brings a gradient of norm `norm` within `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
