//! 8-bit PNG I/O: RGB images in, grayscale masks and heatmaps out.

use std::path::Path;

use anyhow::{Context, Result};
use asbunet::segeval::BinaryMask;
use asbunet::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};

/// Reads an image as a (1, 3, H, W) tensor with values in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor::from_fn((1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })?;
    Ok(t)
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let img = RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let px = |c| to_u8(t.data()[t.offset(0, c, y as usize, x as usize)]);
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Reads a mask; pixels above 127 are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .with_context(|| format!("cannot read mask {}", path.display()))?
        .to_luma8();
    Ok(BinaryMask::from_fn(
        img.height() as usize,
        img.width() as usize,
        |y, x| img.get_pixel(x as u32, y as u32)[0] > 127,
    ))
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Writes plane (0, 0) of `t`, values in [0, 1], as grayscale.
pub fn write_heatmap(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let img = GrayImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        Luma([to_u8(t.data()[t.offset(0, 0, y as usize, x as usize)])])
    });
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
