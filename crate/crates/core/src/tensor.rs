//! Dense rank-4 tensors in (batch, channels, height, width) row-major order.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::shape(format!("zero dimension in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((b, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape::new(b, c, h, w)
    }
}

/// A dense tensor of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, fill: f64) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![fill; shape.len()],
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Tensor::new(shape, 0.0)
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Builds a tensor from a closure over (b, c, y, x).
    pub fn from_fn(
        shape: impl Into<Shape>,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    /// Element at (b, c, y, x).
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> Result<f64> {
        let s = &self.shape;
        if b >= s.batch || c >= s.channels || y >= s.height || x >= s.width {
            return Err(Error::Index {
                b,
                c,
                y,
                x,
                shape: s.to_string(),
            });
        }
        Ok(self.data[self.offset(b, c, y, x)])
    }

    /// Contiguous (height × width) plane for one (batch, channel).
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = self.offset(b, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    /// Contiguous (channels × height × width) block for one batch item.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.channels * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
            grad: self.grad,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it as zeros first if absent.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.shape != self.shape {
            return Err(Error::shape(format!(
                "gradient shape {} does not match tensor shape {}",
                g.shape, self.shape
            )));
        }
        self.accumulate_grad_slice(&g.data)
    }

    pub(crate) fn accumulate_grad_slice(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (acc, v) in buf.iter_mut().zip(g) {
            *acc += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_fills_and_counts() {
        let t = Tensor::new((1, 1, 2, 2), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert!(t.grad().is_none());
        let t = Tensor::new((2, 3, 4, 4), 1.0).unwrap();
        assert_eq!(t.len(), 96);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor::new((1, 0, 2, 2), 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_vec((1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0).unwrap(), 2.0);
        assert_eq!(t.at(0, 0, 0, 0).unwrap(), t.data()[0]);
        assert!(matches!(t.at(0, 0, 2, 0), Err(Error::Index { .. })));

        let t = Tensor::from_fn((2, 3, 4, 5), |b, c, y, x| {
            (((b * 3 + c) * 4 + y) * 5 + x) as f64
        })
        .unwrap();
        assert_eq!(t.at(1, 2, 3, 4).unwrap(), 119.0);
    }

    #[test]
    fn grad_accumulation() {
        let mut t = Tensor::zeros((1, 2, 2, 2)).unwrap();
        let ones = Tensor::new((1, 2, 2, 2), 1.0).unwrap();
        t.accumulate_grad(&ones).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 8]);
        t.accumulate_grad(&ones).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0; 8]);
        let wrong = Tensor::new((1, 1, 2, 2), 1.0).unwrap();
        assert!(t.accumulate_grad(&wrong).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 24)) {
            let t = Tensor::from_vec((1, 2, 3, 4), vals.clone()).unwrap();
            let back = t.reshape((4, 3, 2, 1)).unwrap().reshape((1, 2, 3, 4)).unwrap();
            prop_assert_eq!(back.data(), &vals[..]);
        }

        #[test]
        fn accumulate_order_independent(
            gs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..6)
        ) {
            let shape = (1, 1, 2, 3);
            let mut fwd = Tensor::zeros(shape).unwrap();
            for g in &gs {
                fwd.accumulate_grad(&Tensor::from_vec(shape, g.clone()).unwrap()).unwrap();
            }
            let mut rev = Tensor::zeros(shape).unwrap();
            for g in gs.iter().rev() {
                rev.accumulate_grad(&Tensor::from_vec(shape, g.clone()).unwrap()).unwrap();
            }
            for (a, b) in fwd.grad().unwrap().iter().zip(rev.grad().unwrap()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
