//! Receptive-field arithmetic for layer stacks.
//!
//! The cumulative receptive field after `L` layers is
//! `r = 1 + Σ_l (k_l − 1) · S_l`, where `S_l` is the product of the strides of
//! the layers before `l` and a dilated kernel counts with its effective size
//! `α(k − 1) + 1`. Padding plays no part.

use std::fmt;

use crate::error::{Error, Result};
use crate::spec::{NetworkSpec, Stage, ENCODER_DEPTH};

/// Successive-increment ratio at or above which growth counts as exponential.
pub const NEAR_LINEAR_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfKind {
    Conv,
    AtrousConv,
    Pool,
}

impl fmt::Display for RfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RfKind::Conv => "conv",
            RfKind::AtrousConv => "atrous",
            RfKind::Pool => "pool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfLayer {
    pub name: String,
    pub kind: RfKind,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Stage this layer belongs to, for the linearity report.
    pub group: Option<String>,
}

impl RfLayer {
    pub fn conv(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        RfLayer {
            name: name.into(),
            kind: RfKind::Conv,
            kernel,
            stride,
            dilation: 1,
            group: None,
        }
    }

    pub fn atrous(name: impl Into<String>, kernel: usize, dilation: usize) -> Self {
        RfLayer {
            name: name.into(),
            kind: if dilation > 1 {
                RfKind::AtrousConv
            } else {
                RfKind::Conv
            },
            kernel,
            stride: 1,
            dilation,
            group: None,
        }
    }

    pub fn pool(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        RfLayer {
            name: name.into(),
            kind: RfKind::Pool,
            kernel,
            stride,
            dilation: 1,
            group: None,
        }
    }

    pub fn in_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// `α(k − 1) + 1`.
pub fn effective_kernel(k: usize, dilation: usize) -> usize {
    dilation * (k.saturating_sub(1)) + 1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfStep {
    pub name: String,
    pub kind: RfKind,
    pub group: Option<String>,
    pub effective_kernel: usize,
    /// Product of the strides of all preceding layers.
    pub effective_stride: usize,
    /// Cumulative receptive field up to and including this layer.
    pub rf: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfTrace {
    pub steps: Vec<RfStep>,
}

impl RfTrace {
    pub fn final_rf(&self) -> usize {
        self.steps.last().map_or(1, |s| s.rf)
    }
}

pub fn receptive_field(layers: &[RfLayer]) -> Result<RfTrace> {
    if layers.is_empty() {
        return Err(Error::Value(
            "receptive field of an empty layer list".into(),
        ));
    }
    let mut r = 1;
    let mut stride = 1;
    let mut steps = Vec::with_capacity(layers.len());
    for l in layers {
        if l.kernel == 0 || l.stride == 0 || l.dilation == 0 {
            return Err(Error::Value(format!(
                "layer {} has a zero kernel, stride or dilation",
                l.name
            )));
        }
        let k = effective_kernel(l.kernel, l.dilation);
        r += (k - 1) * stride;
        steps.push(RfStep {
            name: l.name.clone(),
            kind: l.kind,
            group: l.group.clone(),
            effective_kernel: k,
            effective_stride: stride,
            rf: r,
        });
        stride *= l.stride;
    }
    Ok(RfTrace { steps })
}

/// The encoder as an RF layer stack. Each ASB layer contributes its longest
/// path: the 3×3 squeeze followed by the atrous branch (or the plain 3×3
/// branch when it has no atrous filters).
pub fn encoder_layers(spec: &NetworkSpec) -> Vec<RfLayer> {
    let mut v = Vec::new();
    let c1 = spec.conv1;
    v.push(RfLayer::conv("conv1", c1.kernel, c1.stride));
    for idx in 0..=ENCODER_DEPTH {
        let stage = Stage::from_index(idx);
        if idx > 0 {
            let cfg = &spec.asb[idx - 1];
            let g = stage.name();
            v.push(RfLayer::conv(format!("{g}.squeeze"), 3, 1).in_group(&g));
            if cfg.ase3x3 > 0 {
                v.push(RfLayer::atrous(format!("{g}.atrous3x3"), 3, cfg.dilation).in_group(&g));
            } else {
                v.push(RfLayer::conv(format!("{g}.expand3x3"), 3, 1).in_group(&g));
            }
        }
        if spec.pools_after(stage) {
            v.push(RfLayer::pool(format!("pool.{}", stage.name()), 2, 2));
        }
    }
    v
}

/// Stack of single 3×3 atrous convolutions at stride 1, one per rate.
pub fn atrous_stack(dilations: &[usize]) -> Vec<RfLayer> {
    dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| RfLayer::atrous(format!("atrous{}", i + 1), 3, d))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearityReport {
    pub stages: Vec<String>,
    /// Cumulative RF at the end of each stage.
    pub stage_rf: Vec<usize>,
    /// RF added by each stage's own layers, in input pixels.
    pub raw_increments: Vec<usize>,
    /// The same increments in units of the stage's input pixels
    /// (raw increment / effective stride at the stage input).
    pub increments: Vec<f64>,
    /// `max(d[i+1]/d[i], d[i]/d[i+1])` for successive stage increments.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub near_linear: bool,
}

/// Growth of the receptive field across stages.
///
/// Stages are the layer groups when the trace has any (pooling between them
/// is not attributed to a stage); otherwise every non-pool layer is a stage.
/// Growth is near-linear when no successive increment ratio reaches
/// [`NEAR_LINEAR_RATIO`], the ratio of a doubling (exponential) schedule.
pub fn linearity_report(trace: &RfTrace) -> Result<LinearityReport> {
    let grouped = trace.steps.iter().any(|s| s.group.is_some());
    let mut stages: Vec<(String, Vec<&RfStep>)> = Vec::new();
    for s in &trace.steps {
        let key = match (&s.group, grouped) {
            (Some(g), true) => g.clone(),
            (None, false) if s.kind != RfKind::Pool => s.name.clone(),
            _ => continue,
        };
        match stages.last_mut() {
            Some((k, v)) if *k == key && grouped => v.push(s),
            _ => stages.push((key, vec![s])),
        }
    }
    if stages.len() < 2 {
        return Err(Error::Value("linearity needs at least two stages".into()));
    }
    let mut report = LinearityReport {
        stages: Vec::new(),
        stage_rf: Vec::new(),
        raw_increments: Vec::new(),
        increments: Vec::new(),
        ratios: Vec::new(),
        max_ratio: 0.0,
        near_linear: true,
    };
    for (name, steps) in &stages {
        let raw: usize = steps
            .iter()
            .map(|s| (s.effective_kernel - 1) * s.effective_stride)
            .sum();
        report.stages.push(name.clone());
        report
            .stage_rf
            .push(steps.last().expect("non-empty stage").rf);
        report.raw_increments.push(raw);
        report
            .increments
            .push(raw as f64 / steps[0].effective_stride as f64);
    }
    for w in report.increments.windows(2) {
        let r = if w[0] == 0.0 || w[1] == 0.0 {
            if w[0] == w[1] {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            (w[1] / w[0]).max(w[0] / w[1])
        };
        report.ratios.push(r);
    }
    report.max_ratio = report.ratios.iter().copied().fold(0.0, f64::max);
    report.near_linear = report.max_ratio < NEAR_LINEAR_RATIO;
    Ok(report)
}
