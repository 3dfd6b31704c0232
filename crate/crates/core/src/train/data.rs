//! Synthetic segmentation data: soft-edged warm-coloured blobs over a
//! cool textured background, with optional background-coloured occluders.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::segeval::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// Edge width (pixels) over which a blob fades into the background.
const SOFTNESS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    /// Probability that an image gets an occluding bar over its blobs.
    pub occlusion: f64,
    /// Blob radius range as fractions of the image side.
    pub radius_range: (f64, f64),
    /// Inclusive range of blob counts per image.
    pub blobs: (usize, usize),
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            occlusion: 0.3,
            radius_range: (0.06, 0.3),
            blobs: (1, 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobKind {
    Ellipse,
    Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobMeta {
    pub kind: BlobKind,
    /// (y, x) in pixels.
    pub center: (f64, f64),
    /// Mean radius in pixels.
    pub radius: f64,
    /// Ellipse semi-axes (or the polygon's vertex radii range).
    pub extent: (f64, f64),
    pub rotation: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub center: (f64, f64),
    pub half_length: f64,
    pub half_width: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub blobs: Vec<BlobMeta>,
    pub occluder: Option<Occluder>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Shape (1, 3, H, W), values in [0, 1].
    pub image: Tensor,
    pub label: BinaryMask,
    pub meta: SampleMeta,
}

impl SyntheticSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.label.count() as f64 / (self.label.height() * self.label.width()) as f64
    }
}

enum Outline {
    Ellipse { a: f64, b: f64 },
    Polygon(Vec<(f64, f64)>),
}

/// Signed distance (negative inside) in a frame centred on the shape.
fn signed_distance(outline: &Outline, y: f64, x: f64) -> f64 {
    match outline {
        Outline::Ellipse { a, b } => {
            // radial approximation, exact on circles
            let n = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
            (n - 1.0) * a.min(*b)
        }
        Outline::Polygon(v) => {
            let mut inside = false;
            let mut best = f64::INFINITY;
            for i in 0..v.len() {
                let (ay, ax) = v[i];
                let (by, bx) = v[(i + 1) % v.len()];
                if (ay > y) != (by > y) && x < ax + (y - ay) * (bx - ax) / (by - ay) {
                    inside = !inside;
                }
                let (dy, dx) = (by - ay, bx - ax);
                let t = (((y - ay) * dy + (x - ax) * dx) / (dy * dy + dx * dx)).clamp(0.0, 1.0);
                best = best.min(((y - ay - t * dy).powi(2) + (x - ax - t * dx).powi(2)).sqrt());
            }
            if inside {
                -best
            } else {
                best
            }
        }
    }
}

fn alpha(d: f64) -> f64 {
    (0.5 - d / SOFTNESS).clamp(0.0, 1.0)
}

fn rotate(y: f64, x: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (y * c - x * s, y * s + x * c)
}

/// A cool-toned textured background, shape (1, 3, size, size).
pub fn render_background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let base = rng.random_range(0.25..0.5);
    let tint = [
        rng.random_range(-0.05..0.0),
        rng.random_range(-0.02..0.05),
        rng.random_range(0.05..0.15),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.02..0.25);
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.08),
            )
        })
        .collect();
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            let grain = rng.random_range(-0.03..0.03);
            for (c, t) in tint.iter().enumerate() {
                img[c * plane + y * size + x] = (base + t + tex + grain).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn random_blob<R: Rng + ?Sized>(
    size: usize,
    opts: &GeneratorOptions,
    rng: &mut R,
) -> (BlobMeta, Outline) {
    let s = size as f64;
    let (lo, hi) = opts.radius_range;
    let radius = (rng.random_range(lo.ln()..=hi.ln())).exp() * s;
    let center = (
        rng.random_range(0.1 * s..0.9 * s),
        rng.random_range(0.1 * s..0.9 * s),
    );
    let rotation = rng.random_range(0.0..PI);
    let color = [
        rng.random_range(0.75..1.0),
        rng.random_range(0.3..0.75),
        rng.random_range(0.0..0.25),
    ];
    if rng.random_bool(0.6) {
        let aspect: f64 = rng.random_range(0.6..1.0);
        let (a, b) = (radius / aspect.sqrt(), radius * aspect.sqrt());
        (
            BlobMeta {
                kind: BlobKind::Ellipse,
                center,
                radius,
                extent: (a, b),
                rotation,
                color,
            },
            Outline::Ellipse { a, b },
        )
    } else {
        let n = rng.random_range(3..=7);
        let radii: Vec<f64> = (0..n)
            .map(|_| radius * rng.random_range(0.8..1.2))
            .collect();
        let verts = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = 2.0 * PI * i as f64 / n as f64;
                (r * t.sin(), r * t.cos())
            })
            .collect();
        let extent = radii
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        (
            BlobMeta {
                kind: BlobKind::Polygon,
                center,
                radius,
                extent,
                rotation,
                color,
            },
            Outline::Polygon(verts),
        )
    }
}

/// One sample; retried until the foreground fraction lies in (0, 0.9).
pub fn generate_sample<R: Rng + ?Sized>(
    size: usize,
    opts: &GeneratorOptions,
    rng: &mut R,
) -> SyntheticSample {
    loop {
        let sample = render_sample(size, opts, rng);
        let f = sample.foreground_fraction();
        if f > 0.0 && f < 0.9 {
            return sample;
        }
    }
}

fn render_sample<R: Rng + ?Sized>(
    size: usize,
    opts: &GeneratorOptions,
    rng: &mut R,
) -> SyntheticSample {
    let plane = size * size;
    let mut img = render_background(size, rng);
    let mut label = vec![false; plane];
    let count = rng.random_range(opts.blobs.0..=opts.blobs.1);
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let (meta, outline) = random_blob(size, opts, rng);
        let stripe = (rng.random_range(0.1..0.4), rng.random_range(0.0..2.0 * PI));
        for y in 0..size {
            for x in 0..size {
                let (ry, rx) = rotate(
                    y as f64 - meta.center.0,
                    x as f64 - meta.center.1,
                    -meta.rotation,
                );
                let a = alpha(signed_distance(&outline, ry, rx));
                if a == 0.0 {
                    continue;
                }
                let shade = 0.05 * (stripe.0 * rx + stripe.1).sin();
                for c in 0..3 {
                    let p = &mut img[c * plane + y * size + x];
                    *p = *p * (1.0 - a) + (meta.color[c] + shade).clamp(0.0, 1.0) * a;
                }
                if a >= 0.5 {
                    label[y * size + x] = true;
                }
            }
        }
        blobs.push(meta);
    }
    let occluder = rng.random_bool(opts.occlusion).then(|| {
        let b = &blobs[rng.random_range(0..blobs.len())];
        Occluder {
            center: b.center,
            half_length: size as f64,
            half_width: rng.random_range(0.15..0.4) * b.radius,
            rotation: rng.random_range(0.0..PI),
        }
    });
    if let Some(o) = &occluder {
        let gray = rng.random_range(0.3..0.5);
        let outline = Outline::Polygon(vec![
            (-o.half_width, -o.half_length),
            (-o.half_width, o.half_length),
            (o.half_width, o.half_length),
            (o.half_width, -o.half_length),
        ]);
        for y in 0..size {
            for x in 0..size {
                let (ry, rx) = rotate(y as f64 - o.center.0, x as f64 - o.center.1, -o.rotation);
                let a = alpha(signed_distance(&outline, ry, rx));
                if a == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let p = &mut img[c * plane + y * size + x];
                    *p = *p * (1.0 - a) + gray * a;
                }
                if a >= 0.5 {
                    label[y * size + x] = false;
                }
            }
        }
    }
    SyntheticSample {
        image: Tensor::from_vec((1, 3, size, size), img).expect("sized buffer"),
        label: BinaryMask::from_bits(size, size, label).expect("sized buffer"),
        meta: SampleMeta { blobs, occluder },
    }
}

/// `n` samples of `size × size`; identical for identical seeds.
pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_dataset_with(n, size, seed, &GeneratorOptions::default())
}

pub fn generate_dataset_with(
    n: usize,
    size: usize,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Value("dataset needs at least one sample".into()));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Value(format!(
            "image size must be a positive multiple of 16, got {size}"
        )));
    }
    let (lo, hi) = opts.radius_range;
    if !(lo > 0.0 && lo <= hi && hi < 0.5) || opts.blobs.0 == 0 || opts.blobs.0 > opts.blobs.1 {
        return Err(Error::Value(format!("invalid generator options {opts:?}")));
    }
    if !(0.0..=1.0).contains(&opts.occlusion) {
        return Err(Error::Value(format!(
            "occlusion must be a probability, got {}",
            opts.occlusion
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| generate_sample(size, opts, &mut rng))
        .collect())
}

/// Stacks sample images into one batch tensor.
pub fn stack_images(samples: &[&SyntheticSample]) -> Result<Tensor> {
    stack(samples.iter().map(|s| (s.image.shape(), s.image.data())))
}

/// Stacks labels into a (batch, 1, H, W) tensor of 0/1 values.
pub fn stack_labels(samples: &[&SyntheticSample]) -> Result<Tensor> {
    let values: Vec<(Shape, Vec<f64>)> = samples
        .iter()
        .map(|s| {
            (
                Shape::new(1, 1, s.label.height(), s.label.width()),
                s.label.to_values(),
            )
        })
        .collect();
    stack(values.iter().map(|(s, v)| (*s, v.as_slice())))
}

fn stack<'a>(items: impl Iterator<Item = (Shape, &'a [f64])>) -> Result<Tensor> {
    let mut first: Option<Shape> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for (s, v) in items {
        match first {
            None => first = Some(s),
            Some(f) if f.channels != s.channels || f.height != s.height || f.width != s.width => {
                return Err(Error::shape(format!("cannot stack {s} with {f}")));
            }
            _ => {}
        }
        data.extend_from_slice(v);
        n += s.batch;
    }
    let f = first.ok_or_else(|| Error::shape("cannot stack zero items"))?;
    Tensor::from_vec((n, f.channels, f.height, f.width), data)
}
