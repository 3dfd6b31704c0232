//! The atrous space bender (ASB) layer.
//!
//! A 3×3 squeeze convolution feeds three parallel branches: a 1×1 expand,
//! a 3×3 spatial expand and a 3×3 atrous spatial expand with a configurable
//! dilation rate. Branch outputs are concatenated in that order. Every
//! sub-convolution is stride 1 with "same" padding, so H and W are preserved.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{ConvUnit, ConvUnitCache, ParamRole, Parameters};
use crate::ops::{concat_channels, split_channels};
use crate::tensor::Tensor;

/// Filter counts and dilation of one ASB layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsbConfig {
    /// Squeeze (3×3) filters.
    pub ss3x3: usize,
    /// Pointwise expand filters.
    pub e1x1: usize,
    /// 3×3 spatial expand filters.
    pub se3x3: usize,
    /// 3×3 atrous spatial expand filters.
    pub ase3x3: usize,
    pub dilation: usize,
    pub use_batchnorm: bool,
}

pub const BRANCHES: [&str; 3] = ["expand1x1", "expand3x3", "atrous3x3"];

impl AsbConfig {
    pub fn new(
        ss3x3: usize,
        e1x1: usize,
        se3x3: usize,
        ase3x3: usize,
        dilation: usize,
    ) -> Result<Self> {
        let cfg = AsbConfig {
            ss3x3,
            e1x1,
            se3x3,
            ase3x3,
            dilation,
            use_batchnorm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.use_batchnorm = on;
        self
    }

    pub fn expand_total(&self) -> usize {
        self.e1x1 + self.se3x3 + self.ase3x3
    }

    pub fn out_channels(&self) -> usize {
        self.expand_total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ss3x3 == 0 {
            return Err(Error::config("ASB squeeze needs at least one filter"));
        }
        if self.ss3x3 >= self.expand_total() {
            return Err(Error::config(format!(
                "squeeze:expand ratio must stay below 1 ({} squeeze vs {} expand)",
                self.ss3x3,
                self.expand_total()
            )));
        }
        if self.se3x3 + self.ase3x3 == 0 {
            return Err(Error::config(
                "ASB layer needs at least one 3×3 spatial branch filter",
            ));
        }
        if self.dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        Ok(())
    }

    /// Branch filter counts in concatenation order.
    pub fn branch_filters(&self) -> [usize; 3] {
        [self.e1x1, self.se3x3, self.ase3x3]
    }

    /// Weights plus biases for `in_ch` input channels, excluding batch norm.
    pub fn param_count(&self, in_ch: usize) -> usize {
        let ss = self.ss3x3;
        ss * (9 * in_ch + 1)
            + self.e1x1 * (ss + 1)
            + self.se3x3 * (9 * ss + 1)
            + self.ase3x3 * (9 * ss + 1)
    }
}

/// Runs the squeeze → branches → concat dataflow, delegating each
/// convolution (named `{name}.squeeze`, `{name}.expand1x1`, …) to `exec`.
pub fn forward_with(
    name: &str,
    cfg: &AsbConfig,
    x: &Tensor,
    exec: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = exec(&format!("{name}.squeeze"), x)?;
    let mut outs = Vec::with_capacity(3);
    for (branch, filters) in BRANCHES.iter().zip(cfg.branch_filters()) {
        if filters > 0 {
            outs.push(exec(&format!("{name}.{branch}"), &s)?);
        }
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    concat_channels(&refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsbLayer {
    pub name: String,
    pub config: AsbConfig,
    pub squeeze: ConvUnit,
    /// Branches in concatenation order; `None` where the filter count is 0.
    pub branches: [Option<ConvUnit>; 3],
}

#[derive(Debug, Clone)]
pub struct AsbCache {
    squeeze: ConvUnitCache,
    branches: Vec<(usize, ConvUnitCache)>,
}

impl AsbCache {
    pub fn hash_switches(&self, h: &mut impl std::hash::Hasher) {
        self.squeeze.hash_switches(h);
        for (_, c) in &self.branches {
            c.hash_switches(h);
        }
    }
}

impl AsbLayer {
    /// Builds the layer with zero weights.
    pub fn new(name: impl Into<String>, in_ch: usize, cfg: AsbConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let bn = cfg.use_batchnorm;
        let squeeze = ConvUnit::new(
            format!("{name}.squeeze"),
            in_ch,
            cfg.ss3x3,
            3,
            1,
            1,
            bn,
            true,
        )?;
        let spec = [(1, 1), (3, 1), (3, cfg.dilation)];
        let mut branches: [Option<ConvUnit>; 3] = [None, None, None];
        for (i, ((k, d), filters)) in spec.iter().zip(cfg.branch_filters()).enumerate() {
            if filters > 0 {
                branches[i] = Some(ConvUnit::new(
                    format!("{name}.{}", BRANCHES[i]),
                    cfg.ss3x3,
                    filters,
                    *k,
                    1,
                    *d,
                    bn,
                    true,
                )?);
            }
        }
        Ok(AsbLayer {
            name,
            config: cfg,
            squeeze,
            branches,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.squeeze.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.squeeze.init(rng);
        for b in self.branches.iter_mut().flatten() {
            b.init(rng);
        }
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        std::iter::once(&self.squeeze).chain(self.branches.iter().flatten())
    }

    pub fn unit(&self, name: &str) -> Option<&ConvUnit> {
        self.units().find(|u| u.name == name)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        forward_with(&self.name, &self.config, x, &mut |name, t| {
            self.unit(name)
                .ok_or_else(|| Error::config(format!("no unit named {name}")))?
                .forward(t)
        })
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, AsbCache)> {
        let (s, sc) = self.squeeze.forward_train(x)?;
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (i, b) in self.branches.iter_mut().enumerate() {
            if let Some(unit) = b {
                let (y, c) = unit.forward_train(&s)?;
                outs.push(y);
                caches.push((i, c));
            }
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Ok((
            concat_channels(&refs)?,
            AsbCache {
                squeeze: sc,
                branches: caches,
            },
        ))
    }

    /// Splits the gradient across branches, sums their input gradients at the
    /// squeeze output, then continues through the squeeze.
    pub fn backward(&mut self, cache: &AsbCache, grad_out: &Tensor) -> Result<Tensor> {
        let sizes: Vec<usize> = cache
            .branches
            .iter()
            .map(|(i, _)| self.config.branch_filters()[*i])
            .collect();
        let parts = split_channels(grad_out, &sizes)?;
        let mut g_squeeze: Option<Tensor> = None;
        for ((i, c), g) in cache.branches.iter().zip(&parts) {
            let unit = self.branches[*i]
                .as_mut()
                .ok_or_else(|| Error::config("cache refers to a missing branch"))?;
            let gi = unit.backward(c, g)?;
            match g_squeeze.as_mut() {
                None => g_squeeze = Some(gi),
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(gi.data())
                    .for_each(|(a, b)| *a += b),
            }
        }
        let g_squeeze = g_squeeze.ok_or_else(|| Error::config("ASB layer without branches"))?;
        self.squeeze.backward(&cache.squeeze, &g_squeeze)
    }
}

impl Parameters for AsbLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        for u in self.units() {
            u.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        self.squeeze.visit_params_mut(f);
        for b in self.branches.iter_mut().flatten() {
            b.visit_params_mut(f);
        }
    }
}
