//! Channel-wise concatenation and its inverse split.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for t in xs {
        let s = t.shape();
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(Error::shape(format!(
                "cannot concat {s} with {first}: batch/spatial dims differ"
            )));
        }
    }
    let channels = xs.iter().map(|t| t.shape().channels).sum();
    let shape = Shape::new(first.batch, channels, first.height, first.width);
    let mut out = Vec::with_capacity(shape.len());
    for b in 0..first.batch {
        for t in xs {
            out.extend_from_slice(t.item(b));
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Splits `grad` along channels into pieces of the given sizes, in order.
pub fn split_channels(grad: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = grad.shape();
    if sizes.iter().sum::<usize>() != s.channels || sizes.contains(&0) {
        return Err(Error::shape(format!(
            "split sizes {sizes:?} do not partition {} channels",
            s.channels
        )));
    }
    let mut parts: Vec<Vec<f64>> = sizes
        .iter()
        .map(|c| Vec::with_capacity(s.batch * c * s.plane()))
        .collect();
    for b in 0..s.batch {
        let item = grad.item(b);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            let n = c * s.plane();
            part.extend_from_slice(&item[start..start + n]);
            start += n;
        }
    }
    Ok(parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &c)| Tensor::from_parts(Shape::new(s.batch, c, s.height, s.width), d))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_is_identity() {
        let x = Tensor::from_fn((2, 3, 2, 2), |b, c, y, x| {
            (b * 100 + c * 10 + y * 2 + x) as f64
        })
        .unwrap();
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn two_plus_three() {
        let a = Tensor::new((2, 2, 3, 3), 1.0).unwrap();
        let b = Tensor::from_fn((2, 3, 3, 3), |b, c, y, x| (b + c + y + x) as f64).unwrap();
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 3, 3));
        let parts = split_channels(&y, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(y.at(1, 4, 2, 1).unwrap(), b.at(1, 2, 2, 1).unwrap());
    }

    #[test]
    fn spatial_mismatch() {
        let a = Tensor::new((1, 2, 3, 3), 1.0).unwrap();
        let b = Tensor::new((1, 2, 3, 4), 1.0).unwrap();
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels(&[]).is_err());
        assert!(split_channels(&a, &[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_split_is_identity(
            batch in 1usize..3, hw in 1usize..4,
            chans in prop::collection::vec(1usize..4, 1..4), seed in 0u64..1000
        ) {
            let xs: Vec<Tensor> = chans.iter().enumerate().map(|(i, &c)| {
                Tensor::from_fn((batch, c, hw, hw), |b, ch, y, x| {
                    (seed as f64) + (i * 1000 + b * 100 + ch * 10 + y * hw + x) as f64
                }).unwrap()
            }).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            let y = concat_channels(&refs).unwrap();
            let back = split_channels(&y, &chans).unwrap();
            prop_assert_eq!(back, xs);
        }
    }
}
