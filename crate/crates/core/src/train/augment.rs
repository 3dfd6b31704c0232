//! Training-time augmentation: horizontal flip, crop-and-resize, Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::bilinear_resize;
use crate::segeval::BinaryMask;
use crate::tensor::Tensor;
use crate::train::data::{SampleMeta, SyntheticSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOptions {
    pub flip_p: f64,
    /// Smallest crop area as a fraction of the image; 1 disables cropping.
    pub min_crop_area: f64,
    /// Noise σ is drawn uniformly from [0, max_noise_sigma].
    pub max_noise_sigma: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            flip_p: 0.5,
            min_crop_area: 0.8,
            max_noise_sigma: 0.05,
        }
    }
}

/// The geometric part of an augmentation, applied flip first, then crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flipped: bool,
    /// (y0, x0, height, width) of the crop window.
    pub crop: (usize, usize, usize, usize),
    /// Full image (height, width).
    pub size: (usize, usize),
    pub noise_sigma: f64,
}

impl Transform {
    /// Maps a continuous pixel position (pixel centres at integers) of the
    /// original image to the augmented image.
    pub fn map_point(&self, y: f64, x: f64) -> (f64, f64) {
        let (h, w) = self.size;
        let x = if self.flipped { w as f64 - 1.0 - x } else { x };
        let (y0, x0, ch, cw) = self.crop;
        (
            (y - y0 as f64 + 0.5) * h as f64 / ch as f64 - 0.5,
            (x - x0 as f64 + 0.5) * w as f64 / cw as f64 - 0.5,
        )
    }
}

/// Augments with default options and a dedicated RNG stream.
pub fn augment(sample: &SyntheticSample, seed: u64) -> SyntheticSample {
    augment_with(
        sample,
        &AugmentOptions::default(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .0
}

pub fn augment_with<R: Rng + ?Sized>(
    sample: &SyntheticSample,
    opts: &AugmentOptions,
    rng: &mut R,
) -> (SyntheticSample, Transform) {
    let s = sample.image.shape();
    let (h, w) = (s.height, s.width);
    let flipped = rng.random_bool(opts.flip_p.clamp(0.0, 1.0));
    let area = rng.random_range(opts.min_crop_area.clamp(0.0, 1.0)..=1.0);
    let ch = ((h as f64 * area.sqrt()).ceil() as usize).clamp(1, h);
    let cw = ((w as f64 * area.sqrt()).ceil() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let noise_sigma = rng.random_range(0.0..=opts.max_noise_sigma.max(0.0));
    let t = Transform {
        flipped,
        crop: (y0, x0, ch, cw),
        size: (h, w),
        noise_sigma,
    };

    let src_x = |x: usize| if flipped { w - 1 - x } else { x };
    let crop = |t: &Tensor| {
        let sh = t.shape();
        Tensor::from_fn((sh.batch, sh.channels, ch, cw), |b, c, y, x| {
            t.data()[t.offset(b, c, y + y0, src_x(x + x0))]
        })
        .expect("valid crop")
    };
    let resized = |t: &Tensor| {
        let c = crop(t);
        if (ch, cw) == (h, w) {
            c
        } else {
            bilinear_resize(&c, h, w).expect("valid resize")
        }
    };

    let mut image = resized(&sample.image);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in image.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let label_t = Tensor::from_vec((1, 1, h, w), sample.label.to_values()).expect("label size");
    let label = BinaryMask::threshold(&resized(&label_t), 0, 0, 0.5 - 1e-9);

    let scale = ((h as f64 / ch as f64) * (w as f64 / cw as f64)).sqrt();
    let mut meta: SampleMeta = sample.meta.clone();
    for b in &mut meta.blobs {
        b.center = t.map_point(b.center.0, b.center.1);
        b.radius *= scale;
        b.extent = (b.extent.0 * scale, b.extent.1 * scale);
    }
    if let Some(o) = &mut meta.occluder {
        o.center = t.map_point(o.center.0, o.center.1);
        o.half_width *= scale;
        o.half_length *= scale;
    }
    (SyntheticSample { image, label, meta }, t)
}
