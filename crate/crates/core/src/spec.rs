//! Declarative network description and its canonical text form.
//!
//! The text form is a flat `key = value` document:
//!
//! ```text
//! input_shape = 3,128,128          # channels,height,width
//! scaling = 1/16
//! batchnorm = true
//! conv1 = 16,3,2                   # filters,kernel,stride
//! asbl1 = 16,16,8,8,1              # ss3x3,e1x1,se3x3,ase3x3,dilation
//! ...
//! pool_after = conv1,asbl3,asbl5
//! decoder1 = asbl5,16,48,24,24,12,12   # skip,proj,merge,ss3x3,e1x1,se3x3,ase3x3
//! head = 16,1                      # 1x1 filters, 3x3 filters
//! ```

use std::fmt;
use std::str::FromStr;

use crate::asb::AsbConfig;
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvDoc};

pub const ENCODER_DEPTH: usize = 7;

/// Total downsampling of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    Eighth,
    Sixteenth,
}

impl Scaling {
    pub fn factor(self) -> usize {
        match self {
            Scaling::Eighth => 8,
            Scaling::Sixteenth => 16,
        }
    }

    /// Encoder stages followed by a 2×2 max pool.
    pub fn pool_after(self) -> Vec<Stage> {
        match self {
            Scaling::Eighth => vec![Stage::Conv1, Stage::Asb(3)],
            Scaling::Sixteenth => vec![Stage::Conv1, Stage::Asb(3), Stage::Asb(5)],
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.factor())
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/8" | "8" => Ok(Scaling::Eighth),
            "1/16" | "16" => Ok(Scaling::Sixteenth),
            other => Err(Error::config(format!(
                "scaling must be 1/8 or 1/16, got `{other}`"
            ))),
        }
    }
}

/// An encoder stage: the stem convolution or one of the ASB layers (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Conv1,
    Asb(usize),
}

impl Stage {
    /// Position in the encoder, conv1 = 0.
    pub fn index(self) -> usize {
        match self {
            Stage::Conv1 => 0,
            Stage::Asb(i) => i,
        }
    }

    pub fn from_index(i: usize) -> Stage {
        if i == 0 {
            Stage::Conv1
        } else {
            Stage::Asb(i)
        }
    }

    pub fn name(self) -> String {
        match self {
            Stage::Conv1 => "conv1".into(),
            Stage::Asb(i) => format!("asbl{i}"),
        }
    }

    /// Unit-name prefix used for parameters.
    pub fn unit_prefix(self) -> String {
        match self {
            Stage::Conv1 => "conv1".into(),
            Stage::Asb(i) => format!("enc{i}"),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "conv1" {
            return Ok(Stage::Conv1);
        }
        match s.strip_prefix("asbl").and_then(|n| n.parse::<usize>().ok()) {
            Some(i) if (1..=ENCODER_DEPTH).contains(&i) => Ok(Stage::Asb(i)),
            _ => Err(Error::config(format!("unknown encoder stage `{s}`"))),
        }
    }
}

/// The stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1Spec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One long-connect stage: upsample, merge with a projected skip, ASB layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderStage {
    pub skip: Stage,
    pub skip_proj: usize,
    pub merge: usize,
    pub asb: AsbConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderSpec {
    /// Deepest stage first.
    pub stages: Vec<DecoderStage>,
    pub head_1x1: usize,
    pub head_3x3: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// (channels, height, width) of the nominal input.
    pub input_shape: (usize, usize, usize),
    pub scaling: Scaling,
    pub batchnorm: bool,
    pub conv1: Conv1Spec,
    pub asb: Vec<AsbConfig>,
    pub pool_after: Vec<Stage>,
    pub decoder: DecoderSpec,
}

fn encoder_asb(ss: usize, dilation: usize) -> AsbConfig {
    // expand total = 2·ss split 2:1:1
    AsbConfig {
        ss3x3: ss,
        e1x1: ss,
        se3x3: ss / 2,
        ase3x3: ss / 2,
        dilation,
        use_batchnorm: true,
    }
}

fn decoder_stage(skip: Stage, proj: usize, merge: usize) -> DecoderStage {
    DecoderStage {
        skip,
        skip_proj: proj,
        merge,
        asb: encoder_asb(merge / 2, 1),
    }
}

impl NetworkSpec {
    /// Default encoder/decoder for the given scaling at 128×128 RGB input.
    pub fn default_for(scaling: Scaling) -> Self {
        let squeeze = [16, 24, 24, 32, 32, 48, 48];
        let dilations = [1, 2, 3, 4, 3, 2, 1];
        let asb = squeeze
            .iter()
            .zip(dilations)
            .map(|(&ss, d)| encoder_asb(ss, d))
            .collect();
        let mut stages = Vec::new();
        if scaling == Scaling::Sixteenth {
            stages.push(decoder_stage(Stage::Asb(5), 16, 48));
        }
        stages.push(decoder_stage(Stage::Asb(3), 16, 32));
        stages.push(decoder_stage(Stage::Conv1, 8, 16));
        NetworkSpec {
            input_shape: (3, 128, 128),
            scaling,
            batchnorm: true,
            conv1: Conv1Spec {
                filters: 16,
                kernel: 3,
                stride: 2,
            },
            asb,
            pool_after: scaling.pool_after(),
            decoder: DecoderSpec {
                stages,
                head_1x1: 16,
                head_3x3: 1,
            },
        }
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.input_shape = (channels, height, width);
        self
    }

    /// Output channels of an encoder stage.
    pub fn stage_channels(&self, stage: Stage) -> usize {
        match stage {
            Stage::Conv1 => self.conv1.filters,
            Stage::Asb(i) => self.asb[i - 1].out_channels(),
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(Stage::Asb(ENCODER_DEPTH))
    }

    pub fn pools_after(&self, stage: Stage) -> bool {
        self.pool_after.contains(&stage)
    }

    /// Overall input-to-bottleneck downsampling: the stem stride times 2 per pool.
    pub fn downsampling(&self) -> usize {
        self.conv1.stride << self.pool_after.len()
    }

    /// ASB configs with the network-wide batch-norm switch applied.
    pub fn encoder_config(&self, i: usize) -> AsbConfig {
        self.asb[i - 1].with_batchnorm(self.batchnorm)
    }

    pub fn decoder_config(&self, j: usize) -> AsbConfig {
        self.decoder.stages[j].asb.with_batchnorm(self.batchnorm)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input shape has a zero dimension"));
        }
        if self.asb.len() != ENCODER_DEPTH {
            return Err(Error::config(format!(
                "encoder needs exactly {ENCODER_DEPTH} ASB layers, got {}",
                self.asb.len()
            )));
        }
        if self.conv1.filters == 0 || self.conv1.kernel == 0 || self.conv1.stride == 0 {
            return Err(Error::config("conv1 entries must be positive"));
        }
        for cfg in &self.asb {
            cfg.validate()?;
        }
        let mut pools = self.pool_after.clone();
        pools.sort();
        if pools != self.scaling.pool_after() {
            return Err(Error::config(format!(
                "scaling {} requires pooling after {}",
                self.scaling,
                join(&self.scaling.pool_after())
            )));
        }
        if self.downsampling() != self.scaling.factor() {
            return Err(Error::config(format!(
                "conv1 stride {} with {} pools does not give 1/{}",
                self.conv1.stride,
                self.pool_after.len(),
                self.scaling.factor()
            )));
        }
        if h % self.scaling.factor() != 0 || w % self.scaling.factor() != 0 {
            return Err(Error::config(format!(
                "input {h}×{w} is not divisible by {}",
                self.scaling.factor()
            )));
        }
        let stages = &self.decoder.stages;
        if stages.len() != self.pool_after.len() {
            return Err(Error::config(format!(
                "decoder needs one stage per pooling step ({}), got {}",
                self.pool_after.len(),
                stages.len()
            )));
        }
        let mut expected: Vec<Stage> = self.pool_after.clone();
        expected.sort();
        expected.reverse();
        for (st, want) in stages.iter().zip(&expected) {
            if st.skip != *want {
                return Err(Error::config(format!(
                    "decoder stages must take skips deepest first: expected {want}, got {}",
                    st.skip
                )));
            }
            if st.asb.dilation != 1 {
                return Err(Error::config("long-connect ASB layers must use dilation 1"));
            }
            if st.skip_proj == 0 || st.merge == 0 {
                return Err(Error::config("decoder filter counts must be positive"));
            }
            st.asb.validate()?;
        }
        if self.decoder.head_1x1 == 0 || self.decoder.head_3x3 != 1 {
            return Err(Error::config(
                "head needs a positive 1×1 width and exactly one 3×3 output",
            ));
        }
        Ok(())
    }

    /// Trainable parameter count (weights, biases and batch-norm affine terms).
    pub fn param_count(&self) -> usize {
        let bn = |c: usize| if self.batchnorm { 2 * c } else { 0 };
        let conv = |cin: usize, cout: usize, k: usize| cout * (cin * k * k + 1);
        let asb = |cin: usize, cfg: &AsbConfig| {
            cfg.param_count(cin) + bn(cfg.ss3x3) + bn(cfg.e1x1) + bn(cfg.se3x3) + bn(cfg.ase3x3)
        };
        let c1 = self.conv1;
        let mut total = conv(self.input_shape.0, c1.filters, c1.kernel) + bn(c1.filters);
        let mut ch = c1.filters;
        for cfg in &self.asb {
            total += asb(ch, cfg);
            ch = cfg.out_channels();
        }
        for st in &self.decoder.stages {
            let skip_ch = self.stage_channels(st.skip);
            total += conv(skip_ch, st.skip_proj, 1) + bn(st.skip_proj);
            total += conv(ch + st.skip_proj, st.merge, 1) + bn(st.merge);
            total += asb(st.merge, &st.asb);
            ch = st.asb.out_channels();
        }
        let d = &self.decoder;
        total + conv(ch, d.head_1x1, 1) + bn(d.head_1x1) + conv(d.head_1x1, d.head_3x3, 3)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input_shape;
        s += &format!("input_shape = {c},{h},{w}\n");
        s += &format!("scaling = {}\n", self.scaling);
        s += &format!("batchnorm = {}\n", self.batchnorm);
        let c1 = self.conv1;
        s += &format!("conv1 = {},{},{}\n", c1.filters, c1.kernel, c1.stride);
        for (i, a) in self.asb.iter().enumerate() {
            s += &format!(
                "asbl{} = {},{},{},{},{}\n",
                i + 1,
                a.ss3x3,
                a.e1x1,
                a.se3x3,
                a.ase3x3,
                a.dilation
            );
        }
        s += &format!("pool_after = {}\n", join(&self.pool_after));
        for (j, st) in self.decoder.stages.iter().enumerate() {
            let a = st.asb;
            s += &format!(
                "decoder{} = {},{},{},{},{},{},{}\n",
                j + 1,
                st.skip,
                st.skip_proj,
                st.merge,
                a.ss3x3,
                a.e1x1,
                a.se3x3,
                a.ase3x3
            );
        }
        s += &format!(
            "head = {},{}\n",
            self.decoder.head_1x1, self.decoder.head_3x3
        );
        s
    }

    /// Parses and validates the text form. Missing keys fall back to the
    /// default spec for the given scaling.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let scaling: Scaling = doc.take_parsed("scaling")?.unwrap_or(Scaling::Sixteenth);
        let mut spec = NetworkSpec::default_for(scaling);
        if let Some(v) = doc.take("input_shape") {
            let d: Vec<usize> = parse_list("input_shape", &v)?;
            if d.len() != 3 {
                return Err(Error::config("input_shape needs channels,height,width"));
            }
            spec.input_shape = (d[0], d[1], d[2]);
        }
        if let Some(b) = doc.take_parsed::<bool>("batchnorm")? {
            spec.batchnorm = b;
        }
        if let Some(v) = doc.take("conv1") {
            let d: Vec<usize> = parse_list("conv1", &v)?;
            if d.len() != 3 {
                return Err(Error::config("conv1 needs filters,kernel,stride"));
            }
            spec.conv1 = Conv1Spec {
                filters: d[0],
                kernel: d[1],
                stride: d[2],
            };
        }
        for i in 1..=ENCODER_DEPTH {
            let key = format!("asbl{i}");
            if let Some(v) = doc.take(&key) {
                let d: Vec<usize> = parse_list(&key, &v)?;
                if d.len() != 5 {
                    return Err(Error::config(format!(
                        "{key} needs ss3x3,e1x1,se3x3,ase3x3,dilation"
                    )));
                }
                spec.asb[i - 1] = AsbConfig {
                    ss3x3: d[0],
                    e1x1: d[1],
                    se3x3: d[2],
                    ase3x3: d[3],
                    dilation: d[4],
                    use_batchnorm: true,
                };
            }
        }
        if doc.contains("asbl8") {
            return Err(Error::config(format!(
                "encoder has exactly {ENCODER_DEPTH} ASB layers"
            )));
        }
        if let Some(v) = doc.take("pool_after") {
            spec.pool_after = parse_list("pool_after", &v)?;
        }
        let explicit: Vec<usize> = (1..=8)
            .filter(|j| doc.contains(&format!("decoder{j}")))
            .collect();
        if !explicit.is_empty() {
            let mut stages = Vec::new();
            for j in 1.. {
                let key = format!("decoder{j}");
                let Some(v) = doc.take(&key) else { break };
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 7 {
                    return Err(Error::config(format!(
                        "{key} needs skip,proj,merge,ss3x3,e1x1,se3x3,ase3x3"
                    )));
                }
                let n: Vec<usize> = parse_list(&key, &parts[1..].join(","))?;
                stages.push(DecoderStage {
                    skip: parts[0].parse()?,
                    skip_proj: n[0],
                    merge: n[1],
                    asb: AsbConfig {
                        ss3x3: n[2],
                        e1x1: n[3],
                        se3x3: n[4],
                        ase3x3: n[5],
                        dilation: 1,
                        use_batchnorm: true,
                    },
                });
            }
            spec.decoder.stages = stages;
        }
        if let Some(v) = doc.take("head") {
            let d: Vec<usize> = parse_list("head", &v)?;
            if d.len() != 2 {
                return Err(Error::config("head needs c1x1,c3x3"));
            }
            spec.decoder.head_1x1 = d[0];
            spec.decoder.head_3x3 = d[1];
        }
        doc.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

fn join(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| s.name())
        .collect::<Vec<_>>()
        .join(",")
}
