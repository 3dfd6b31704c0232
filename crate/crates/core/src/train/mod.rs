//! Training: synthetic data, augmentation, splitting and the momentum-SGD loop.

pub mod augment;
pub mod config;
pub mod data;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::network::Network;
use crate::ops::weighted_bce_with_logits;

pub use augment::{augment, augment_with, AugmentOptions, Transform};
pub use config::TrainConfig;
pub use data::{
    generate_dataset, generate_dataset_with, stack_images, stack_labels, GeneratorOptions,
    SyntheticSample,
};
pub use optim::{clip_scale, grad_norm, Momentum, StepDecay};

/// Shuffles `data` by `seed` and splits it `train:test`; sizes are within one
/// of the exact ratio and both parts are non-empty.
pub fn split_dataset<T>(
    mut data: Vec<T>,
    ratio: (usize, usize),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if data.len() < 2 {
        return Err(Error::Value(format!("cannot split {} samples", data.len())));
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Value(format!(
            "split ratio {}:{} needs both parts positive",
            ratio.0, ratio.1
        )));
    }
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let exact = data.len() as f64 * ratio.0 as f64 / (ratio.0 + ratio.1) as f64;
    let n_train = (exact.round() as usize).clamp(1, data.len() - 1);
    let test = data.split_off(n_train);
    Ok((data, test))
}

/// Background-to-foreground pixel ratio of a 0/1 label batch, clamped.
pub fn batch_pos_weight(labels: &[f64], range: (f64, f64)) -> f64 {
    let fg = labels.iter().filter(|&&v| v > 0.5).count();
    let bg = labels.len() - fg;
    if fg == 0 {
        return range.1;
    }
    (bg as f64 / fg as f64).clamp(range.0, range.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub pos_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

pub fn train(
    net: &mut Network,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_observer(net, data, cfg, &mut |_| {})
}

/// Trains in place, calling `observer` after every step. Weights are rounded
/// to `f32` at the end so a saved checkpoint reproduces the trained network.
pub fn train_with_observer(
    net: &mut Network,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Value("training data is empty".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = StepDecay::per_epoch_fraction(
        cfg.lr_init,
        cfg.lr_factor,
        cfg.lr_step_fraction,
        steps_per_epoch,
        cfg.lr_floor,
    );
    let mut opt = Momentum::new(cfg.momentum, cfg.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let aug = AugmentOptions::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<SyntheticSample>;
            let batch: Vec<&SyntheticSample> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| augment_with(&data[i], &aug, &mut rng).0)
                    .collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data[i]).collect()
            };
            let x = stack_images(&batch)?;
            let y = stack_labels(&batch)?;
            let pos_weight = cfg
                .pos_weight
                .unwrap_or_else(|| batch_pos_weight(y.data(), cfg.pos_weight_range));
            let lr = schedule.lr(step);

            net.zero_grads();
            let (logits, cache) = net.forward_train(&x)?;
            let (loss, grad) = weighted_bce_with_logits(&logits, &y, pos_weight)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {loss} at step {step} (epoch {epoch}, lr {lr})"
                )));
            }
            net.backward(&cache, &grad)?;
            let norm =
                grad_norm(net).map_err(|e| Error::Diverged(format!("{e} at step {step}")))?;
            opt.step(net, lr, clip_scale(norm, cfg.clip_norm));

            let log = StepLog {
                epoch,
                step,
                lr,
                loss,
                grad_norm: norm,
                pos_weight,
            };
            observer(&log);
            report.steps.push(log);
            epoch_loss += loss;
            step += 1;
        }
        report
            .epoch_losses
            .push(epoch_loss / steps_per_epoch as f64);
    }
    net.visit_params_mut(&mut |_, _, t| {
        t.take_grad();
    });
    net.snap_to_f32();
    Ok(report)
}
