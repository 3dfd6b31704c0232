//! Ignore-band segmentation metric.
//!
//! Each label object gets a ring (dilation XOR erosion with a disk whose
//! radius grows with the object's size); ring pixels are removed from both
//! masks before the Jaccard index is taken, and every predicted blob that
//! misses all label objects costs 1.0.

pub mod components;
pub mod mask;
pub mod metric;
pub mod morphology;

pub use components::components;
pub use mask::BinaryMask;
pub use metric::{
    evaluate_dataset, ignore_band, jaccard, jaccard_within, masked_jaccard, score_image,
    score_with_penalty, EvalReport, IgnoreBandParams, ImageScore,
};
pub use morphology::{dilate, disk, erode};
