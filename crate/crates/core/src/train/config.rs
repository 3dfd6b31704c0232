//! Training hyperparameters and their `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kv::{parse_list, KvDoc};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub momentum: f64,
    pub lr_init: f64,
    /// Fraction of an epoch between learning-rate decays.
    pub lr_step_fraction: f64,
    pub lr_factor: f64,
    pub lr_floor: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Positive-class weight of the loss; `None` derives it per batch.
    pub pos_weight: Option<f64>,
    /// Bounds for the per-batch positive weight.
    pub pos_weight_range: (f64, f64),
    pub clip_norm: f64,
    /// Train:test proportions.
    pub split: (usize, usize),
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            lr_init: 1e-2,
            lr_step_fraction: 0.3,
            lr_factor: 0.1,
            lr_floor: 1e-6,
            l2: 1e-12,
            batch_size: 8,
            epochs: 20,
            pos_weight: None,
            pos_weight_range: (1.0, 20.0),
            clip_norm: 10.0,
            split: (80, 20),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!(
                "lr_factor must be in (0, 1), got {}",
                self.lr_factor
            ));
        }
        if !(self.lr_step_fraction > 0.0 && self.lr_step_fraction.is_finite()) {
            return bad(format!(
                "lr_step_fraction must be positive, got {}",
                self.lr_step_fraction
            ));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr_init) {
            return bad(format!(
                "lr_floor must be in [0, lr_init], got {}",
                self.lr_floor
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("pos_weight must be positive, got {w}"));
            }
        }
        let (lo, hi) = self.pos_weight_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "pos_weight_range must satisfy 0 < lo <= hi, got {lo},{hi}"
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if self.split.0 == 0 || self.split.1 == 0 {
            return bad("split parts must both be positive".into());
        }
        Ok(())
    }

    /// Fraction of the data that goes to the training split.
    pub fn train_fraction(&self) -> f64 {
        self.split.0 as f64 / (self.split.0 + self.split.1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pw = self
            .pos_weight
            .map_or("auto".to_string(), |w| w.to_string());
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "lr_init = {}", self.lr_init);
        let _ = writeln!(s, "lr_step_fraction = {}", self.lr_step_fraction);
        let _ = writeln!(s, "lr_factor = {}", self.lr_factor);
        let _ = writeln!(s, "lr_floor = {}", self.lr_floor);
        let _ = writeln!(s, "l2 = {}", self.l2);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "pos_weight = {pw}");
        let _ = writeln!(
            s,
            "pos_weight_range = {},{}",
            self.pos_weight_range.0, self.pos_weight_range.1
        );
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "split = {}:{}", self.split.0, self.split.1);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parses a config; absent keys keep their defaults, unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let mut c = TrainConfig::default();
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = doc.take_parsed($key)? {
                    $dst = v;
                }
            };
        }
        field!("momentum", c.momentum);
        field!("lr_init", c.lr_init);
        field!("lr_step_fraction", c.lr_step_fraction);
        field!("lr_factor", c.lr_factor);
        field!("lr_floor", c.lr_floor);
        field!("l2", c.l2);
        field!("batch_size", c.batch_size);
        field!("epochs", c.epochs);
        field!("clip_norm", c.clip_norm);
        field!("augment", c.augment);
        field!("seed", c.seed);
        if let Some(v) = doc.take("pos_weight") {
            c.pos_weight = if v == "auto" {
                None
            } else {
                Some(
                    v.parse()
                        .map_err(|_| Error::config(format!("pos_weight: cannot parse {v:?}")))?,
                )
            };
        }
        if let Some(v) = doc.take("pos_weight_range") {
            let r: Vec<f64> = parse_list("pos_weight_range", &v)?;
            if r.len() != 2 {
                return Err(Error::config("pos_weight_range needs lo,hi"));
            }
            c.pos_weight_range = (r[0], r[1]);
        }
        if let Some(v) = doc.take("split") {
            let parts: Vec<&str> = v.split(':').map(str::trim).collect();
            let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[a, b]) => c.split = (a, b),
                _ => {
                    return Err(Error::config(format!(
                        "split: expected train:test, got {v:?}"
                    )))
                }
            }
        }
        doc.finish()?;
        c.validate()?;
        Ok(c)
    }
}
