//! Central finite differences for checking analytic gradients.
//!
//! Nothing here touches a backward pass: derivatives are estimated purely
//! from repeated evaluations of a scalar function.

use rand::Rng;

use crate::error::Result;
use crate::layers::{ParamRole, Parameters};
use crate::network::Network;
use crate::ops::weighted_bce_with_logits;
use crate::tensor::Tensor;

/// Default step for central differences in double precision.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-4;

/// Estimates `d f / d x[i]` for every `i` in `indices` by
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference<F>(x: &mut [f64], indices: &[usize], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of [`check_network_gradients`].
#[derive(Debug, Clone, Default)]
pub struct NetworkCheck {
    /// Weights compared.
    pub checked: usize,
    /// Weights whose every step straddled a ReLU or max-pool switch.
    pub skipped: usize,
    /// Comparisons that needed a step below [`STEP`] to stay on one smooth piece.
    pub shrunk: usize,
    pub max_error: f64,
}

/// Compares the analytic weighted-BCE gradient of `net` against central
/// differences on a random `fraction` of its convolution weights.
///
/// Each difference starts at [`STEP`]. When the two probes land on different
/// ReLU/max-pool switch patterns the function is not differentiable within
/// the step, so the step shrinks tenfold, down to `STEP / 100`; weights still
/// straddling a switch are counted in `skipped`.
pub fn check_network_gradients<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    label: &Tensor,
    pos_weight: f64,
    fraction: f64,
    rng: &mut R,
) -> Result<NetworkCheck> {
    let eval = |n: &Network| -> Result<(f64, u64)> {
        let mut n = n.clone();
        let (z, cache) = n.forward_train(x)?;
        Ok((
            weighted_bce_with_logits(&z, label, pos_weight)?.0,
            cache.switch_signature(),
        ))
    };
    let mut trained = net.clone();
    let (z, cache) = trained.forward_train(x)?;
    let base_sig = cache.switch_signature();
    let (_, g) = weighted_bce_with_logits(&z, label, pos_weight)?;
    trained.backward(&cache, &g)?;

    let mut samples: Vec<(String, usize, f64)> = Vec::new();
    trained.visit_params(&mut |name, role, t| {
        if role == ParamRole::Weight {
            if let Some(grad) = t.grad() {
                for (i, &gv) in grad.iter().enumerate() {
                    if rng.random_bool(fraction) {
                        samples.push((name.to_string(), i, gv));
                    }
                }
            }
        }
    });

    let mut report = NetworkCheck::default();
    let mut probe = net.clone();
    for (name, i, analytic) in &samples {
        let mut orig = 0.0;
        probe.visit_params(&mut |n, _, t| {
            if n == name {
                orig = t.data()[*i];
            }
        });
        let set = |p: &mut Network, v: f64| {
            p.visit_params_mut(&mut |n, _, t| {
                if n == name {
                    t.data_mut()[*i] = v;
                }
            })
        };
        let mut numeric = None;
        for (k, h) in [STEP, STEP / 10.0, STEP / 100.0].into_iter().enumerate() {
            set(&mut probe, orig + h);
            let (plus, sp) = eval(&probe)?;
            set(&mut probe, orig - h);
            let (minus, sm) = eval(&probe)?;
            set(&mut probe, orig);
            if sp == base_sig && sm == base_sig {
                numeric = Some((plus - minus) / (2.0 * h));
                if k > 0 {
                    report.shrunk += 1;
                }
                break;
            }
        }
        match numeric {
            Some(n) => {
                report.checked += 1;
                report.max_error = report.max_error.max(relative_error(*analytic, n));
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}
