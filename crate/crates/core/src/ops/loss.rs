//! Weighted binary cross entropy.
//!
//! `loss = −mean(w·y·ln p + (1−y)·ln(1−p))` with `p = σ(z)`, evaluated from
//! the logit `z` as `w·y·softplus(−z) + (1−y)·softplus(z)`. Logits are
//! clamped to ±[`LOGIT_CLAMP`] so neither log ever sees zero.

use crate::error::{Error, Result};
use crate::ops::activation::sigmoid_scalar;
use crate::tensor::Tensor;

pub const LOGIT_CLAMP: f64 = 30.0;

#[inline]
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check(pred: &Tensor, label: &Tensor, pos_weight: f64) -> Result<()> {
    if pred.shape() != label.shape() {
        return Err(Error::shape(format!(
            "prediction {} vs label {}",
            pred.shape(),
            label.shape()
        )));
    }
    if !(pos_weight > 0.0 && pos_weight.is_finite()) {
        return Err(Error::Value(format!(
            "pos_weight must be positive, got {pos_weight}"
        )));
    }
    if let Some(v) = label.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Value(format!("label value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Loss and its gradient with respect to the logits.
pub fn weighted_bce_with_logits(
    logits: &Tensor,
    label: &Tensor,
    pos_weight: f64,
) -> Result<(f64, Tensor)> {
    check(logits, label, pos_weight)?;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z0, &y) in logits.data().iter().zip(label.data()) {
        let z = z0.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        loss += pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
        let g = if z0.abs() < LOGIT_CLAMP {
            let p = sigmoid_scalar(z);
            pos_weight * y * (p - 1.0) + (1.0 - y) * p
        } else {
            0.0
        };
        grad.push(g / n);
    }
    Ok((loss / n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Loss on probabilities, mapped back to clamped logits first.
pub fn weighted_bce(pred: &Tensor, label: &Tensor, pos_weight: f64) -> Result<f64> {
    if let Some(p) = pred.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Value(format!("prediction {p} outside [0, 1]")));
    }
    let logits = pred.map(|p| (p.ln() - (-p).ln_1p()).clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
    Ok(weighted_bce_with_logits(&logits, label, pos_weight)?.0)
}
