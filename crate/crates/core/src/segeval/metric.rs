//! Ignore band, band-masked Jaccard and the misdetection penalty.

use super::components::{component_mask, components};
use super::mask::BinaryMask;
use super::morphology::{dilate, erode};
use crate::error::{Error, Result};

pub const DEFAULT_OSF_BETA: f64 = 0.05;
pub const DEFAULT_MIN_RADIUS: usize = 1;
pub const MISDETECTION_PENALTY: f64 = 1.0;

/// Scale of the structuring element: `max(min_radius, round(beta·√area))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgnoreBandParams {
    pub osf_beta: f64,
    pub min_radius: usize,
}

impl Default for IgnoreBandParams {
    fn default() -> Self {
        IgnoreBandParams {
            osf_beta: DEFAULT_OSF_BETA,
            min_radius: DEFAULT_MIN_RADIUS,
        }
    }
}

impl IgnoreBandParams {
    pub fn new(osf_beta: f64, min_radius: usize) -> Result<Self> {
        if !(osf_beta > 0.0 && osf_beta.is_finite()) {
            return Err(Error::config(format!(
                "osf_beta must be positive, got {osf_beta}"
            )));
        }
        if min_radius == 0 {
            return Err(Error::config("min_radius must be at least 1"));
        }
        Ok(IgnoreBandParams {
            osf_beta,
            min_radius,
        })
    }

    pub fn radius(&self, area: usize) -> usize {
        let r = (self.osf_beta * (area as f64).sqrt()).round() as usize;
        r.max(self.min_radius)
    }
}

/// Pixels that count for evaluation: the complement of the union, over label
/// components, of (dilated XOR eroded) with a per-component radius.
pub fn ignore_band(label: &BinaryMask, params: &IgnoreBandParams) -> BinaryMask {
    let (h, w) = label.dims();
    let mut band = BinaryMask::new(h, w);
    for comp in components(label) {
        let m = component_mask(h, w, &comp);
        let r = params.radius(comp.len());
        let ring = dilate(&m, r).xor(&erode(&m, r)).expect("same dims");
        band = band.or(&ring).expect("same dims");
    }
    band.not()
}

/// `|Y∧K ∧ P∧K| / |Y∧K ∨ P∧K|` for the evaluation mask `K`; 1.0 on an empty union.
pub fn jaccard_within(label: &BinaryMask, pred: &BinaryMask, keep: &BinaryMask) -> Result<f64> {
    let y = label.and(keep)?;
    let p = pred.and(keep)?;
    let inter = y.and(&p)?.count();
    let union = y.or(&p)?.count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn jaccard(label: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    let (h, w) = label.dims();
    jaccard_within(label, pred, &BinaryMask::full(h, w))
}

pub fn masked_jaccard(
    label: &BinaryMask,
    pred: &BinaryMask,
    params: &IgnoreBandParams,
) -> Result<f64> {
    jaccard_within(label, pred, &ignore_band(label, params))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    /// Band-masked Jaccard with misdetected components removed from the prediction.
    pub jaccard: f64,
    pub misdetections: usize,
    /// `jaccard − 1.0 · misdetections`.
    pub score: f64,
}

/// Band-masked Jaccard minus 1.0 per misdetection. A misdetection is a
/// connected component of the whole prediction that does not touch the label
/// and reaches outside the ignore band. Its pixels are penalized instead of
/// also counting in the Jaccard union. Components that touch the label are
/// detections, so a prediction bleeding past the band stays one detection.
pub fn score_image(
    label: &BinaryMask,
    pred: &BinaryMask,
    params: &IgnoreBandParams,
) -> Result<ImageScore> {
    let keep = ignore_band(label, params);
    let (h, w) = label.dims();
    let mut kept = pred.clone();
    let mut misdetections = 0;
    for comp in components(pred) {
        let false_detection = comp.iter().all(|&p| !label.bits()[p]);
        if false_detection && comp.iter().any(|&p| keep.bits()[p]) {
            misdetections += 1;
            kept = kept.and_not(&component_mask(h, w, &comp))?;
        }
    }
    let jaccard = jaccard_within(label, &kept, &keep)?;
    Ok(ImageScore {
        jaccard,
        misdetections,
        score: jaccard - MISDETECTION_PENALTY * misdetections as f64,
    })
}

pub fn score_with_penalty(
    label: &BinaryMask,
    pred: &BinaryMask,
    params: &IgnoreBandParams,
) -> Result<f64> {
    Ok(score_image(label, pred, params)?.score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_score: f64,
    pub mean_jaccard: f64,
    pub total_misdetections: usize,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.per_image.len()
    }
}

pub fn evaluate_dataset(
    labels: &[BinaryMask],
    preds: &[BinaryMask],
    params: &IgnoreBandParams,
) -> Result<EvalReport> {
    if labels.len() != preds.len() {
        return Err(Error::Value(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let per_image = labels
        .iter()
        .zip(preds)
        .map(|(l, p)| score_image(l, p, params))
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    Ok(EvalReport {
        mean_score: per_image.iter().map(|s| s.score).sum::<f64>() / n,
        mean_jaccard: per_image.iter().map(|s| s.jaccard).sum::<f64>() / n,
        total_misdetections: per_image.iter().map(|s| s.misdetections).sum(),
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x)
        })
    }

    #[test]
    fn empty_label_counts_everything() {
        assert_eq!(
            ignore_band(&BinaryMask::new(5, 7), &IgnoreBandParams::default()),
            BinaryMask::full(5, 7)
        );
    }

    #[test]
    fn radius_formula() {
        let p = IgnoreBandParams::default();
        assert_eq!(p.radius(1), 1);
        assert_eq!(p.radius(400), 1);
        assert_eq!(p.radius(1600), 2);
        assert!(p.radius(3200) >= p.radius(1600));
        assert!(IgnoreBandParams::new(0.0, 1).is_err());
        assert!(IgnoreBandParams::new(0.1, 0).is_err());
    }

    #[test]
    fn worked_examples() {
        let p = IgnoreBandParams::default();
        let label = square(16, 16, 4, 4, 6);
        assert_eq!(score_with_penalty(&label, &label, &p).unwrap(), 1.0);
        // disagreement confined to the band
        let grown = dilate(&label, 1);
        assert_eq!(masked_jaccard(&label, &grown, &p).unwrap(), 1.0);
        let mut blob = label.clone();
        blob.set(14, 14, true);
        blob.set(14, 15, true);
        assert_eq!(score_with_penalty(&label, &blob, &p).unwrap(), 0.0);
        assert_eq!(
            score_with_penalty(&label, &BinaryMask::new(16, 16), &p).unwrap(),
            0.0
        );
        assert_eq!(
            masked_jaccard(&label, &square(16, 16, 12, 12, 3), &p).unwrap(),
            0.0
        );
    }

    #[test]
    fn dataset_mean() {
        let p = IgnoreBandParams::default();
        let l = square(8, 8, 2, 2, 4);
        let e = BinaryMask::new(8, 8);
        let r = evaluate_dataset(&[l.clone(), l.clone()], &[l.clone(), e], &p).unwrap();
        assert_eq!(r.count(), 2);
        assert_eq!(r.mean_score, 0.5);
        assert!(evaluate_dataset(std::slice::from_ref(&l), &[], &p).is_err());
    }
}
