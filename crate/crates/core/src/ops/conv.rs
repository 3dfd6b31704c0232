//! Standard, pointwise and dilated (atrous) 2-D convolution.
//!
//! The forward pass is a cross-correlation whose kernel taps are spaced
//! `dilation` pixels apart:
//!
//! ```text
//! y[b, o, i, j] = bias[o] + Σ_c Σ_ky Σ_kx w[o, c, ky, kx]
//!                 · x[b, c, i·s + ky·d − pad_top, j·s + kx·d − pad_left]
//! ```
//!
//! with out-of-image samples read as zero. A dilation of 1 is the ordinary
//! convolution. Both passes lower to im2col followed by a GEMM.

use crate::error::{Error, Result};
use crate::ops::gemm::gemm;
use crate::tensor::{Shape, Tensor};

/// Explicit zero padding on each side of the spatial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Total padding `dilation·(k−1)` per axis, split floor/ceil before/after.
    pub fn same(kh: usize, kw: usize, dilation: usize) -> Self {
        let th = dilation * (kh.saturating_sub(1));
        let tw = dilation * (kw.saturating_sub(1));
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }

    fn is_zero(&self) -> bool {
        *self == Padding::default()
    }
}

/// Kernel, bias and geometry of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Shape (out_channels, in_channels, kh, kw).
    pub weight: Tensor,
    /// Shape (1, out_channels, 1, 1).
    pub bias: Tensor,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        let out = weight.shape().batch;
        if bias.shape() != Shape::new(1, out, 1, 1) {
            return Err(Error::shape(format!(
                "bias shape {} does not match {out} output channels",
                bias.shape()
            )));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            dilation,
            padding,
        })
    }

    /// Zero weights with "same" padding for the given kernel and dilation.
    pub fn zeros_same(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        ConvParams::new(
            Tensor::zeros((out_ch, in_ch, k, k))?,
            Tensor::zeros((1, out_ch, 1, 1))?,
            stride,
            dilation,
            Padding::same(k, k, dilation),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.height, s.width)
    }

    /// Number of learnable scalars (kernel plus bias).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Spatial output size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < span_h || pw < span_w {
            return Err(Error::shape(format!(
                "dilated kernel {span_h}×{span_w} exceeds padded input {ph}×{pw}"
            )));
        }
        Ok((
            (ph - span_h) / self.stride + 1,
            (pw - span_w) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_hw() == (1, 1) && self.stride == 1 && self.padding.is_zero()
    }

    fn geometry(&self, x: Shape) -> Result<Geometry> {
        if x.channels != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, kernel expects {}",
                x.channels,
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_hw(x.height, x.width)?;
        let (kh, kw) = self.kernel_hw();
        Ok(Geometry {
            in_ch: x.channels,
            h: x.height,
            w: x.width,
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            dilation: self.dilation,
            pad_top: self.padding.top,
            pad_left: self.padding.left,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate hit by output index `o` and tap `k`, if inside the image.
    #[inline]
    fn source(
        o: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad: usize,
        n: usize,
    ) -> Option<usize> {
        let pos = o * stride + k * dilation;
        if pos < pad || pos - pad >= n {
            None
        } else {
            Some(pos - pad)
        }
    }
}

/// Unrolls one batch item (in_ch × h × w) into a (in_ch·kh·kw) × (oh·ow) matrix.
fn im2col(item: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match Geometry::source(oy, ky, g.stride, g.dilation, g.pad_top, g.h) {
                        None => out_row.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match Geometry::source(
                                    ox, kx, g.stride, g.dilation, g.pad_left, g.w,
                                ) {
                                    Some(ix) => src[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input item.
fn col2im_add(cols: &[f64], g: &Geometry, item: &mut [f64]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.dilation, g.pad_top, g.h)
                    else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(ix) =
                            Geometry::source(ox, kx, g.stride, g.dilation, g.pad_left, g.w)
                        {
                            dst[ix] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let g = p.geometry(xs)?;
    let out_ch = p.out_channels();
    let (k, n) = (g.rows(), g.cols());
    let out_shape = Shape::new(xs.batch, out_ch, g.oh, g.ow);
    let mut out = vec![0.0; out_shape.len()];
    let mut cols = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * n]
    };
    let bias = p.bias.data();

    for b in 0..xs.batch {
        let dst = &mut out[b * out_ch * n..(b + 1) * out_ch * n];
        for (o, row) in dst.chunks_exact_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        let src: &[f64] = if p.is_pointwise() {
            x.item(b)
        } else {
            im2col(x.item(b), &g, &mut cols);
            &cols
        };
        gemm(out_ch, k, n, p.weight.data(), false, src, false, 1.0, dst);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let xs = x.shape();
    let g = p.geometry(xs)?;
    let out_ch = p.out_channels();
    let expect = Shape::new(xs.batch, out_ch, g.oh, g.ow);
    if grad_out.shape() != expect {
        return Err(Error::shape(format!(
            "grad_out shape {} does not match forward output {expect}",
            grad_out.shape()
        )));
    }
    let (k, n) = (g.rows(), g.cols());
    let pointwise = p.is_pointwise();
    let mut grad_w = vec![0.0; p.weight.len()];
    let mut grad_b = vec![0.0; out_ch];
    let mut grad_x = vec![0.0; xs.len()];
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; k * n]
    };
    let mut grad_cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; k * n]
    };
    let item_len = xs.channels * xs.plane();

    for b in 0..xs.batch {
        let go = &grad_out.data()[b * out_ch * n..(b + 1) * out_ch * n];
        for (o, row) in go.chunks_exact(n).enumerate() {
            grad_b[o] += row.iter().sum::<f64>();
        }
        let src: &[f64] = if pointwise {
            x.item(b)
        } else {
            im2col(x.item(b), &g, &mut cols);
            &cols
        };
        // dW (out × k) += dY (out × n) · colsᵀ (n × k)
        gemm(out_ch, n, k, go, false, src, true, 1.0, &mut grad_w);

        let gx_item = &mut grad_x[b * item_len..(b + 1) * item_len];
        if pointwise {
            // dX (k × n) = Wᵀ (k × out) · dY (out × n)
            gemm(k, out_ch, n, p.weight.data(), true, go, false, 0.0, gx_item);
        } else {
            gemm(
                k,
                out_ch,
                n,
                p.weight.data(),
                true,
                go,
                false,
                0.0,
                &mut grad_cols,
            );
            col2im_add(&grad_cols, &g, gx_item);
        }
    }

    Ok(ConvGrads {
        input: Tensor::from_parts(xs, grad_x),
        weight: Tensor::from_parts(p.weight.shape(), grad_w),
        bias: Tensor::from_parts(p.bias.shape(), grad_b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation straight from the cross-correlation definition.
    fn direct_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let xs = x.shape();
        let (kh, kw) = p.kernel_hw();
        let (oh, ow) = p.output_hw(xs.height, xs.width).unwrap();
        Tensor::from_fn((xs.batch, p.out_channels(), oh, ow), |b, o, i, j| {
            let mut acc = p.bias.data()[o];
            for c in 0..xs.channels {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (i * p.stride + ky * p.dilation) as isize - p.padding.top as isize;
                        let ix =
                            (j * p.stride + kx * p.dilation) as isize - p.padding.left as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < xs.height
                            && (ix as usize) < xs.width
                        {
                            acc += p.weight.at(o, c, ky, kx).unwrap()
                                * x.at(b, c, iy as usize, ix as usize).unwrap();
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_conv(
        rng: &mut ChaCha8Rng,
        out: usize,
        inp: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> ConvParams {
        ConvParams::new(
            random_tensor(rng, (out, inp, k, k)),
            random_tensor(rng, (1, out, 1, 1)),
            stride,
            dilation,
            padding,
        )
        .unwrap()
    }

    /// Spreads a dilated kernel into an explicit dense kernel with zeros between taps.
    fn expand_kernel(p: &ConvParams) -> ConvParams {
        let s = p.weight.shape();
        let d = p.dilation;
        let (eh, ew) = (d * (s.height - 1) + 1, d * (s.width - 1) + 1);
        let w = Tensor::from_fn((s.batch, s.channels, eh, ew), |o, c, y, x| {
            if y % d == 0 && x % d == 0 {
                p.weight.at(o, c, y / d, x / d).unwrap()
            } else {
                0.0
            }
        })
        .unwrap();
        ConvParams::new(w, p.bias.clone(), p.stride, 1, p.padding).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, (2, 3, 5, 6));
        let mut p = ConvParams::zeros_same(3, 3, 3, 1, 1).unwrap();
        for c in 0..3 {
            let off = p.weight.offset(c, c, 1, 1);
            p.weight.data_mut()[off] = 1.0;
        }
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn one_dimensional_dilated_sum() {
        // x = [1, 2, 3, 4, 5], w = [1, 1, 1], rate 2, taps left-aligned at x[i].
        let x = Tensor::from_vec((1, 1, 1, 5), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let pad = Padding {
            right: 4,
            ..Padding::default()
        };
        let p = ConvParams::new(
            Tensor::new((1, 1, 1, 3), 1.0).unwrap(),
            Tensor::zeros((1, 1, 1, 1)).unwrap(),
            1,
            2,
            pad,
        )
        .unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[9.0, 6.0, 8.0, 4.0, 5.0]);
        assert_eq!(y.data(), direct_conv(&x, &p).data());

        // Same row placed at kernel row 0 of a 3×3 kernel.
        let mut w = Tensor::zeros((1, 1, 3, 3)).unwrap();
        w.data_mut()[..3].fill(1.0);
        let pad = Padding {
            bottom: 4,
            right: 4,
            ..Padding::default()
        };
        let p = ConvParams::new(w, Tensor::zeros((1, 1, 1, 1)).unwrap(), 1, 2, pad).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().at(0, 0, 0, 0).unwrap(), 9.0);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, d) in &[
            (1, 1, 1),
            (3, 1, 1),
            (3, 2, 1),
            (3, 1, 2),
            (3, 1, 4),
            (3, 2, 3),
            (1, 2, 1),
        ] {
            let x = random_tensor(&mut rng, (2, 3, 9, 11));
            let p = random_conv(&mut rng, 4, 3, k, s, d, Padding::same(k, k, d));
            let y = conv2d_forward(&x, &p).unwrap();
            let want = direct_conv(&x, &p);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} d{d}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_dims_at_stride_one() {
        let x = Tensor::new((1, 2, 7, 10), 1.0).unwrap();
        for d in 1..=5 {
            let p = ConvParams::zeros_same(3, 2, 3, 1, d).unwrap();
            assert_eq!(
                conv2d_forward(&x, &p).unwrap().shape(),
                Shape::new(1, 3, 7, 10)
            );
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::new((1, 2, 4, 4), 1.0).unwrap();
        let p = ConvParams::zeros_same(3, 3, 3, 1, 1).unwrap();
        assert!(conv2d_forward(&x, &p).is_err());
        let p = ConvParams::new(
            Tensor::zeros((1, 2, 3, 3)).unwrap(),
            Tensor::zeros((1, 1, 1, 1)).unwrap(),
            1,
            3,
            Padding::default(),
        )
        .unwrap();
        assert!(conv2d_forward(&x, &p).is_err());
        assert!(ConvParams::zeros_same(1, 1, 3, 0, 1).is_err());
    }

    #[test]
    fn backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, (1, 2, 5, 5));
        let p = random_conv(&mut rng, 3, 2, 3, 1, 2, Padding::same(3, 3, 2));
        let y = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(y.shape()).unwrap()).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let x = Tensor::from_vec((1, 1, 1, 1), vec![3.0]).unwrap();
        let p = ConvParams::new(
            Tensor::from_vec((1, 1, 1, 1), vec![-2.0]).unwrap(),
            Tensor::zeros((1, 1, 1, 1)).unwrap(),
            1,
            1,
            Padding::default(),
        )
        .unwrap();
        let go = Tensor::from_vec((1, 1, 1, 1), vec![0.5]).unwrap();
        let g = conv2d_backward(&x, &p, &go).unwrap();
        assert_eq!(g.weight.data(), &[1.5]);
        assert_eq!(g.input.data(), &[-1.0]);
        assert_eq!(g.bias.data(), &[0.5]);
    }

    fn check_grads(
        seed: u64,
        xs: (usize, usize, usize, usize),
        out: usize,
        k: usize,
        s: usize,
        d: usize,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, xs);
        let p = random_conv(&mut rng, out, xs.1, k, s, d, Padding::same(k, k, d));
        let y = conv2d_forward(&x, &p).unwrap();
        let r = random_tensor(&mut rng, y.shape());
        let loss = |y: &Tensor| {
            y.data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = conv2d_backward(&x, &p, &r).unwrap();

        let mut xv = x.data().to_vec();
        let idx: Vec<usize> = (0..xv.len()).collect();
        let nx = central_difference(&mut xv, &idx, STEP, |v| {
            loss(&conv2d_forward(&Tensor::from_vec(xs, v.to_vec()).unwrap(), &p).unwrap())
        });
        let mut wv = p.weight.data().to_vec();
        let idx: Vec<usize> = (0..wv.len()).collect();
        let nw = central_difference(&mut wv, &idx, STEP, |v| {
            let mut q = p.clone();
            q.weight.data_mut().copy_from_slice(v);
            loss(&conv2d_forward(&x, &q).unwrap())
        });
        let mut bv = p.bias.data().to_vec();
        let idx: Vec<usize> = (0..bv.len()).collect();
        let nb = central_difference(&mut bv, &idx, STEP, |v| {
            let mut q = p.clone();
            q.bias.data_mut().copy_from_slice(v);
            loss(&conv2d_forward(&x, &q).unwrap())
        });
        max_relative_error(g.input.data(), &nx)
            .max(max_relative_error(g.weight.data(), &nw))
            .max(max_relative_error(g.bias.data(), &nb))
    }

    #[test]
    fn backward_matches_finite_differences_dilated() {
        let err = check_grads(4, (1, 2, 5, 5), 2, 3, 1, 2);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn backward_matches_finite_differences_strided_and_pointwise() {
        assert!(check_grads(5, (2, 3, 6, 7), 2, 3, 2, 1) < 1e-4);
        assert!(check_grads(6, (2, 3, 4, 4), 4, 1, 1, 1) < 1e-4);
        assert!(check_grads(7, (1, 2, 8, 8), 3, 3, 1, 3) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dilation_equals_expanded_kernel(seed in 0u64..1000, d in 1usize..5, k in 1usize..4, s in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, (1, 2, 12, 13));
            let p = random_conv(&mut rng, 3, 2, k, s, d, Padding::same(k, k, d));
            let a = conv2d_forward(&x, &p).unwrap();
            let b = conv2d_forward(&x, &expand_kernel(&p)).unwrap();
            prop_assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
