//! Bilinear resizing with half-pixel centers (`align_corners = false`).
//!
//! Output pixel `i` samples source coordinate `(i + 0.5)·in/out − 0.5`,
//! clamped below at 0; the upper neighbour is clamped to the last row/column.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be at least 1×1"));
    }
    let s = x.shape();
    let out_shape = Shape::new(s.batch, s.channels, out_h, out_w);
    if out_h == s.height && out_w == s.width {
        return Ok(Tensor::from_parts(out_shape, x.data().to_vec()));
    }
    let ty = taps(s.height, out_h);
    let tx = taps(s.width, out_w);
    let mut out = Vec::with_capacity(out_shape.len());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let p = x.plane(b, c);
            for y in &ty {
                let r0 = &p[y.lo * s.width..(y.lo + 1) * s.width];
                let r1 = &p[y.hi * s.width..(y.hi + 1) * s.width];
                for t in &tx {
                    let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * t.frac;
                    let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * t.frac;
                    out.push(top + (bot - top) * y.frac);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Adjoint of [`bilinear_resize`] for an input of shape `input`.
pub fn bilinear_resize_backward(input: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let g = grad_out.shape();
    if g.batch != input.batch || g.channels != input.channels {
        return Err(Error::shape(format!(
            "grad_out {g} incompatible with resize input {input}"
        )));
    }
    if g.height == input.height && g.width == input.width {
        return Ok(Tensor::from_parts(input, grad_out.data().to_vec()));
    }
    let ty = taps(input.height, g.height);
    let tx = taps(input.width, g.width);
    let mut gx = vec![0.0; input.len()];
    for b in 0..input.batch {
        for c in 0..input.channels {
            let go = grad_out.plane(b, c);
            let base = ((b * input.channels) + c) * input.plane();
            let plane = &mut gx[base..base + input.plane()];
            for (i, y) in ty.iter().enumerate() {
                for (j, t) in tx.iter().enumerate() {
                    let v = go[i * g.width + j];
                    let (wy1, wx1) = (y.frac, t.frac);
                    let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                    plane[y.lo * input.width + t.lo] += v * wy0 * wx0;
                    plane[y.lo * input.width + t.hi] += v * wy0 * wx1;
                    plane[y.hi * input.width + t.lo] += v * wy1 * wx0;
                    plane[y.hi * input.width + t.hi] += v * wy1 * wx1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input, gx))
}
