//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Learned affine parameters plus running statistics.
///
/// All four arrays have shape (1, channels, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub decay: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Ok(BatchNormState {
            gamma: Tensor::new(shape, 1.0)?,
            beta: Tensor::zeros(shape)?,
            running_mean: Tensor::zeros(shape)?,
            running_var: Tensor::new(shape, 1.0)?,
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: Shape) -> Result<()> {
        if x.channels != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels given input {x}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that inference output is `scale·x + shift`.
    pub fn inference_affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_var.data()[c] + self.epsilon).sqrt();
                let scale = self.gamma.data()[c] * inv;
                (
                    scale,
                    self.beta.data()[c] - self.running_mean.data()[c] * scale,
                )
            })
            .collect()
    }
}

/// Values saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Shape,
}

/// Normalizes `x`. In training mode batch statistics are used and the
/// running statistics move by `running ← decay·running + (1−decay)·batch`.
pub fn batchnorm_forward(
    x: &Tensor,
    s: &mut BatchNormState,
    training: bool,
) -> Result<(Tensor, Option<BnCache>)> {
    if !training {
        return Ok((batchnorm_inference(x, s)?, None));
    }
    let shape = x.shape();
    s.check(shape)?;
    let (c_n, plane) = (shape.channels, shape.plane());
    let count = (shape.batch * plane) as f64;
    let mut mean = vec![0.0; c_n];
    let mut var = vec![0.0; c_n];
    for b in 0..shape.batch {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.plane(b, c).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..shape.batch {
        for c in 0..c_n {
            var[c] += x
                .plane(b, c)
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.epsilon).sqrt()).collect();

    let mut x_hat = vec![0.0; shape.len()];
    let mut out = vec![0.0; shape.len()];
    for b in 0..shape.batch {
        for c in 0..c_n {
            let off = x.offset(b, c, 0, 0);
            let (g, bt) = (s.gamma.data()[c], s.beta.data()[c]);
            for i in off..off + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                x_hat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }

    let d = s.decay;
    for c in 0..c_n {
        let rm = &mut s.running_mean.data_mut()[c];
        *rm = d * *rm + (1.0 - d) * mean[c];
        let rv = &mut s.running_var.data_mut()[c];
        *rv = d * *rv + (1.0 - d) * var[c];
    }

    Ok((
        Tensor::from_parts(shape, out),
        Some(BnCache {
            x_hat,
            inv_std,
            shape,
        }),
    ))
}

pub fn batchnorm_inference(x: &Tensor, s: &BatchNormState) -> Result<Tensor> {
    let shape = x.shape();
    s.check(shape)?;
    let affine = s.inference_affine();
    let mut out = x.data().to_vec();
    for b in 0..shape.batch {
        for (c, &(scale, shift)) in affine.iter().enumerate() {
            let off = x.offset(b, c, 0, 0);
            for v in &mut out[off..off + shape.plane()] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_backward(
    cache: &BnCache,
    s: &BatchNormState,
    grad_out: &Tensor,
) -> Result<BnGrads> {
    let shape = cache.shape;
    if grad_out.shape() != shape {
        return Err(Error::shape(format!(
            "grad_out shape {} does not match batch norm input {shape}",
            grad_out.shape()
        )));
    }
    let (c_n, plane) = (shape.channels, shape.plane());
    let count = (shape.batch * plane) as f64;
    let go = grad_out.data();
    let mut g_gamma = vec![0.0; c_n];
    let mut g_beta = vec![0.0; c_n];
    for b in 0..shape.batch {
        for c in 0..c_n {
            let off = grad_out.offset(b, c, 0, 0);
            let xh = &cache.x_hat[off..off + plane];
            for (&g, &x) in go[off..off + plane].iter().zip(xh) {
                g_beta[c] += g;
                g_gamma[c] += g * x;
            }
        }
    }
    let mut gx = vec![0.0; shape.len()];
    for b in 0..shape.batch {
        for c in 0..c_n {
            let off = grad_out.offset(b, c, 0, 0);
            let gamma = s.gamma.data()[c];
            // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
            let k = gamma * cache.inv_std[c] / count;
            for i in off..off + plane {
                gx[i] = k * (count * go[i] - g_beta[c] - cache.x_hat[i] * g_gamma[c]);
            }
        }
    }
    let ps = Shape::new(1, c_n, 1, 1);
    Ok(BnGrads {
        input: Tensor::from_parts(shape, gx),
        gamma: Tensor::from_parts(ps, g_gamma),
        beta: Tensor::from_parts(ps, g_beta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale)).unwrap()
    }

    #[test]
    fn inference_identity_with_unit_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, (2, 3, 4, 4), 2.0);
        let s = BatchNormState::new(3).unwrap();
        let y = batchnorm_inference(&x, &s).unwrap();
        let tol = 1e-5;
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= tol * b.abs().max(1.0));
        }
    }

    #[test]
    fn training_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Spread of ±30 keeps the ε/(σ²+ε) shrinkage of the variance below 1e-7.
        let x = random(&mut rng, (4, 2, 5, 5), 30.0);
        let mut s = BatchNormState::new(2).unwrap();
        s.gamma.data_mut().copy_from_slice(&[1.5, -0.5]);
        s.beta.data_mut().copy_from_slice(&[0.25, 2.0]);
        let (y, _) = batchnorm_forward(&x, &mut s, true).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.plane(b, c).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((mean - s.beta.data()[c]).abs() < 1e-6);
            assert!((var - s.gamma.data()[c].powi(2)).abs() < 1e-6);
        }
    }

    #[test]
    fn running_mean_geometric_approach() {
        let x = Tensor::from_fn((2, 1, 2, 2), |b, _, y, x| (b * 4 + y * 2 + x) as f64).unwrap();
        let batch_mean = 3.5;
        let mut s = BatchNormState::new(1).unwrap();
        for n in 1..=2 {
            batchnorm_forward(&x, &mut s, true).unwrap();
            let expect = batch_mean * (1.0 - 0.99f64.powi(n));
            assert!((s.running_mean.data()[0] - expect).abs() < 1e-12);
        }
        // gap to the batch mean shrinks by exactly the decay per step
        let gap = batch_mean - s.running_mean.data()[0];
        batchnorm_forward(&x, &mut s, true).unwrap();
        let gap2 = batch_mean - s.running_mean.data()[0];
        assert!((gap2 / gap - 0.99).abs() < 1e-12);
        assert!(s.running_var.data()[0] >= 0.0);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros((1, 2, 2, 2)).unwrap();
        let mut s = BatchNormState::new(3).unwrap();
        assert!(batchnorm_forward(&x, &mut s, true).is_err());
        assert!(batchnorm_forward(&x, &mut s, false).is_err());
    }

    #[test]
    fn finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = (3, 2, 3, 3);
        let x = random(&mut rng, shape, 1.0);
        let mut s = BatchNormState::new(2).unwrap();
        s.gamma.data_mut().copy_from_slice(&[0.7, -1.3]);
        s.beta.data_mut().copy_from_slice(&[0.1, 0.2]);
        let r = random(&mut rng, shape, 1.0);
        let loss = |x: &Tensor, s: &BatchNormState| {
            let mut s = s.clone();
            let (y, _) = batchnorm_forward(x, &mut s, true).unwrap();
            y.data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut s_run = s.clone();
        let (_, cache) = batchnorm_forward(&x, &mut s_run, true).unwrap();
        let g = batchnorm_backward(&cache.unwrap(), &s, &r).unwrap();

        let mut v = x.data().to_vec();
        let idx: Vec<usize> = (0..v.len()).collect();
        let nx = central_difference(&mut v, &idx, STEP, |v| {
            loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &s)
        });
        assert!(max_relative_error(g.input.data(), &nx) < 1e-4);

        let mut gv = s.gamma.data().to_vec();
        let ng = central_difference(&mut gv, &[0, 1], STEP, |v| {
            let mut t = s.clone();
            t.gamma.data_mut().copy_from_slice(v);
            loss(&x, &t)
        });
        assert!(max_relative_error(g.gamma.data(), &ng) < 1e-4);
        let mut bv = s.beta.data().to_vec();
        let nb = central_difference(&mut bv, &[0, 1], STEP, |v| {
            let mut t = s.clone();
            t.beta.data_mut().copy_from_slice(v);
            loss(&x, &t)
        });
        assert!(max_relative_error(g.beta.data(), &nb) < 1e-4);
    }
}
