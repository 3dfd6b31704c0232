//! Max pooling with recorded argmax positions.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::config("pool kernel and stride must be positive"));
        }
        Ok(PoolParams { kernel, stride })
    }

    /// The 2×2, stride-2 pool used between encoder stages.
    pub const fn halving() -> Self {
        PoolParams {
            kernel: 2,
            stride: 2,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel > h || self.kernel > w {
            return Err(Error::shape(format!(
                "pool window {k}×{k} larger than input {h}×{w}",
                k = self.kernel
            )));
        }
        Ok((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }
}

/// Output of [`maxpool_forward`]: the pooled tensor and, for every output
/// element, the flat input offset of its maximum.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
    input_shape: Shape,
}

/// Window maximum; ties resolve to the first element in row-major order.
pub fn maxpool_forward(x: &Tensor, p: PoolParams) -> Result<Pooled> {
    let s = x.shape();
    let (oh, ow) = p.output_hw(s.height, s.width)?;
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let base = x.offset(b, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = base + oy * p.stride * s.width + ox * p.stride;
                    for ky in 0..p.kernel {
                        let row = base + (oy * p.stride + ky) * s.width + ox * p.stride;
                        for kx in 0..p.kernel {
                            let v = data[row + kx];
                            if v > best {
                                best = v;
                                best_at = row + kx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_parts(out_shape, out),
        argmax,
        input_shape: s,
    })
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool_backward(pooled: &Pooled, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != pooled.output.shape() {
        return Err(Error::shape(format!(
            "grad_out shape {} does not match pooled shape {}",
            grad_out.shape(),
            pooled.output.shape()
        )));
    }
    let mut gx = vec![0.0; pooled.input_shape.len()];
    for (&at, &g) in pooled.argmax.iter().zip(grad_out.data()) {
        gx[at] += g;
    }
    Ok(Tensor::from_parts(pooled.input_shape, gx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input() {
        let x = Tensor::new((1, 2, 4, 6), 3.5).unwrap();
        let y = maxpool_forward(&x, PoolParams::halving()).unwrap();
        assert_eq!(y.output.shape(), Shape::new(1, 2, 2, 3));
        assert!(y.output.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn max_of_four() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool_forward(&x, PoolParams::halving()).unwrap();
        assert_eq!(y.output.data(), &[4.0]);
        assert_eq!(y.argmax, vec![3]);
    }

    #[test]
    fn ties_pick_first_row_major() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![0.0, 5.0, 5.0, 5.0]).unwrap();
        let y = maxpool_forward(&x, PoolParams::halving()).unwrap();
        assert_eq!(y.argmax, vec![1]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::new((1, 1, 1, 4), 0.0).unwrap();
        assert!(maxpool_forward(&x, PoolParams::halving()).is_err());
    }

    #[test]
    fn backward_routes_to_argmax_only() {
        let x =
            Tensor::from_vec((1, 1, 2, 4), vec![1.0, 9.0, 0.0, 2.0, 3.0, 4.0, 7.0, 1.0]).unwrap();
        let y = maxpool_forward(&x, PoolParams::halving()).unwrap();
        let go = Tensor::from_vec((1, 1, 1, 2), vec![10.0, 20.0]).unwrap();
        let gx = maxpool_backward(&y, &go).unwrap();
        assert_eq!(gx.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0]);
    }

    #[test]
    fn finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let shape = (2, 2, 6, 6);
            let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
            let r: Vec<f64> = (0..2 * 2 * 9)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let loss = |t: &Tensor| {
                let y = maxpool_forward(t, PoolParams::halving()).unwrap();
                y.output
                    .data()
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let pooled = maxpool_forward(&x, PoolParams::halving()).unwrap();
            let go = Tensor::from_vec((2, 2, 3, 3), r.clone()).unwrap();
            let g = maxpool_backward(&pooled, &go).unwrap();
            let mut v = x.data().to_vec();
            let idx: Vec<usize> = (0..v.len()).collect();
            let n = central_difference(&mut v, &idx, STEP, |v| {
                loss(&Tensor::from_vec(shape, v.to_vec()).unwrap())
            });
            assert!(max_relative_error(g.data(), &n) < 1e-4);
        }
    }
}
