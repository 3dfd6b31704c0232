//! Convolution units (conv → optional batch norm → optional ReLU) and the
//! parameter-visiting machinery shared by every composite layer.

use std::hash::Hasher;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{
    batchnorm_backward, batchnorm_forward, batchnorm_inference, conv2d_backward, conv2d_forward,
    relu_backward, BatchNormState, BnCache, ConvParams, Padding,
};
use crate::tensor::Tensor;

/// What a parameter tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamRole::Weight | ParamRole::Bias | ParamRole::BnGamma | ParamRole::BnBeta
        )
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::BnGamma => "bn.gamma",
            ParamRole::BnBeta => "bn.beta",
            ParamRole::BnRunningMean => "bn.running_mean",
            ParamRole::BnRunningVar => "bn.running_var",
        }
    }

    /// Dimensions recorded for the tensor in checkpoints.
    pub fn dims(self, t: &Tensor) -> Vec<usize> {
        match self {
            ParamRole::Weight => t.shape().dims().to_vec(),
            _ => vec![t.len()],
        }
    }
}

/// Anything owning named parameter tensors, visited in a fixed topological order.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, t| t.zero_grad());
    }
}

/// Draws He-normal weights, `N(0, 2 / fan_in)`, and zeroes the bias.
///
/// Samples are rounded to `f32` so that the float checkpoint stores them exactly.
pub fn kaiming_normal<R: Rng + ?Sized>(conv: &mut ConvParams, rng: &mut R) {
    let s = conv.weight.shape();
    let fan_in = (s.channels * s.height * s.width) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    for w in conv.weight.data_mut() {
        *w = normal.sample(rng) as f32 as f64;
    }
    conv.bias.data_mut().fill(0.0);
}

/// One convolution followed by optional batch norm and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub conv: ConvParams,
    pub bn: Option<BatchNormState>,
    pub relu: bool,
}

/// Intermediates kept by [`ConvUnit::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvUnitCache {
    input: Tensor,
    bn: Option<BnCache>,
    output: Tensor,
    relu: bool,
}

impl ConvUnitCache {
    pub fn output_shape(&self) -> crate::tensor::Shape {
        self.output.shape()
    }

    /// Feeds the ReLU on/off pattern into `h`.
    pub fn hash_switches(&self, h: &mut impl Hasher) {
        if self.relu {
            for chunk in self.output.data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i));
                h.write_u64(bits);
            }
        }
    }
}

impl ConvUnit {
    /// Square `k×k` convolution with "same" padding and zero weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        batchnorm: bool,
        relu: bool,
    ) -> Result<Self> {
        let conv = ConvParams::new(
            Tensor::zeros((out_ch, in_ch, k, k))?,
            Tensor::zeros((1, out_ch, 1, 1))?,
            stride,
            dilation,
            Padding::same(k, k, dilation),
        )?;
        Ok(ConvUnit {
            name: name.into(),
            conv,
            bn: if batchnorm {
                Some(BatchNormState::new(out_ch)?)
            } else {
                None
            },
            relu,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        kaiming_normal(&mut self.conv, rng);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d_forward(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = batchnorm_inference(&y, bn)?;
        }
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ConvUnitCache)> {
        let mut y = conv2d_forward(x, &self.conv)?;
        let mut bn_cache = None;
        if let Some(bn) = self.bn.as_mut() {
            let (z, cache) = batchnorm_forward(&y, bn, true)?;
            y = z;
            bn_cache = cache;
        }
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let cache = ConvUnitCache {
            input: x.clone(),
            bn: bn_cache,
            output: y.clone(),
            relu: self.relu,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients and returns the gradient for the input.
    pub fn backward(&mut self, cache: &ConvUnitCache, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = if self.relu {
            relu_backward(&cache.output, grad_out)?
        } else {
            grad_out.clone()
        };
        if let (Some(bn), Some(bc)) = (self.bn.as_mut(), cache.bn.as_ref()) {
            let bg = batchnorm_backward(bc, bn, &g)?;
            bn.gamma.accumulate_grad(&bg.gamma)?;
            bn.beta.accumulate_grad(&bg.beta)?;
            g = bg.input;
        }
        let cg = conv2d_backward(&cache.input, &self.conv, &g)?;
        self.conv.weight.accumulate_grad(&cg.weight)?;
        self.conv.bias.accumulate_grad(&cg.bias)?;
        Ok(cg.input)
    }
}

impl Parameters for ConvUnit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        let n = &self.name;
        f(&format!("{n}.weight"), ParamRole::Weight, &self.conv.weight);
        f(&format!("{n}.bias"), ParamRole::Bias, &self.conv.bias);
        if let Some(bn) = &self.bn {
            f(&format!("{n}.bn.gamma"), ParamRole::BnGamma, &bn.gamma);
            f(&format!("{n}.bn.beta"), ParamRole::BnBeta, &bn.beta);
            f(
                &format!("{n}.bn.running_mean"),
                ParamRole::BnRunningMean,
                &bn.running_mean,
            );
            f(
                &format!("{n}.bn.running_var"),
                ParamRole::BnRunningVar,
                &bn.running_var,
            );
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        let n = self.name.clone();
        f(
            &format!("{n}.weight"),
            ParamRole::Weight,
            &mut self.conv.weight,
        );
        f(&format!("{n}.bias"), ParamRole::Bias, &mut self.conv.bias);
        if let Some(bn) = self.bn.as_mut() {
            f(&format!("{n}.bn.gamma"), ParamRole::BnGamma, &mut bn.gamma);
            f(&format!("{n}.bn.beta"), ParamRole::BnBeta, &mut bn.beta);
            f(
                &format!("{n}.bn.running_mean"),
                ParamRole::BnRunningMean,
                &mut bn.running_mean,
            );
            f(
                &format!("{n}.bn.running_var"),
                ParamRole::BnRunningVar,
                &mut bn.running_var,
            );
        }
    }
}
