//! The ASBU-Net encoder/decoder assembled from a [`NetworkSpec`].
//!
//! Encoder: conv1 (stride 2) and seven ASB layers, with 2×2 max pools after
//! the stages listed in `pool_after`. The output of each pooled stage, taken
//! before pooling, is a skip connection. Decoder: one long-connect stage per
//! skip, deepest first, each doing bilinear upsample to the skip resolution,
//! concatenation with the 1×1-projected skip, a 1×1 merge conv and a
//! dilation-1 ASB layer. Head: 1×1 conv, 3×3 conv to one logit channel,
//! bilinear resize to the input size and sigmoid.
//!
//! The float, calibration and quantized paths all share [`encoder_graph`] and
//! [`decoder_graph`], which route every convolution through a callback keyed
//! by unit name.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asb::{self, AsbCache, AsbLayer};
use crate::error::{Error, Result};
use crate::layers::{ConvUnit, ConvUnitCache, ParamRole, Parameters};
use crate::ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, maxpool_backward, maxpool_forward,
    sigmoid, split_channels, PoolParams, Pooled,
};
use crate::spec::{NetworkSpec, Stage, ENCODER_DEPTH};
use crate::tensor::{Shape, Tensor};

/// Executes the named convolution unit on its input.
pub type UnitExec<'a> = dyn FnMut(&str, &Tensor) -> Result<Tensor> + 'a;

/// Encoder skip outputs keyed by stage, shallowest first.
pub type Skips = Vec<(Stage, Tensor)>;

pub fn dec_prefix(j: usize) -> String {
    format!("dec{}", j + 1)
}

fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    let s = x.shape();
    let f = spec.scaling.factor();
    if s.channels != spec.input_shape.0 {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {}",
            spec.input_shape.0, s.channels
        )));
    }
    if !s.height.is_multiple_of(f) || !s.width.is_multiple_of(f) {
        return Err(Error::shape(format!(
            "input {}×{} is not divisible by {f}",
            s.height, s.width
        )));
    }
    Ok(())
}

/// Runs the encoder, returning the bottleneck and the pre-pool skip outputs.
pub fn encoder_graph(
    spec: &NetworkSpec,
    x: &Tensor,
    exec: &mut UnitExec<'_>,
) -> Result<(Tensor, Skips)> {
    check_input(spec, x)?;
    let mut skips = Vec::new();
    let mut h = exec("conv1", x)?;
    for idx in 0..=ENCODER_DEPTH {
        let stage = Stage::from_index(idx);
        if idx > 0 {
            h = asb::forward_with(&stage.unit_prefix(), &spec.encoder_config(idx), &h, exec)?;
        }
        if spec.pools_after(stage) {
            let pooled = maxpool_forward(&h, PoolParams::halving())?.output;
            skips.push((stage, std::mem::replace(&mut h, pooled)));
        }
    }
    Ok((h, skips))
}

/// Runs the decoder and head, returning logits at `out_hw`.
pub fn decoder_graph(
    spec: &NetworkSpec,
    bottleneck: &Tensor,
    skips: &[(Stage, Tensor)],
    out_hw: (usize, usize),
    exec: &mut UnitExec<'_>,
) -> Result<Tensor> {
    let mut h = bottleneck.clone();
    for (j, st) in spec.decoder.stages.iter().enumerate() {
        let p = dec_prefix(j);
        let skip = skips
            .iter()
            .find(|(s, _)| *s == st.skip)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::shape(format!("missing skip output for {}", st.skip)))?;
        let ss = skip.shape();
        if ss.batch != h.shape().batch {
            return Err(Error::shape("skip batch differs from decoder input"));
        }
        let up = bilinear_resize(&h, ss.height, ss.width)?;
        let proj = exec(&format!("{p}.skip_proj"), skip)?;
        let merged = exec(&format!("{p}.merge"), &concat_channels(&[&up, &proj])?)?;
        h = asb::forward_with(&format!("{p}.asb"), &spec.decoder_config(j), &merged, exec)?;
    }
    let h = exec("head.conv1x1", &h)?;
    let z = exec("head.conv3x3", &h)?;
    bilinear_resize(&z, out_hw.0, out_hw.1)
}

/// Full forward pass to logits at input resolution.
pub fn forward_graph(spec: &NetworkSpec, x: &Tensor, exec: &mut UnitExec<'_>) -> Result<Tensor> {
    let (b, skips) = encoder_graph(spec, x, exec)?;
    let s = x.shape();
    decoder_graph(spec, &b, &skips, (s.height, s.width), exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub skip_proj: ConvUnit,
    pub merge: ConvUnit,
    pub asb: AsbLayer,
}

/// Executable network with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    pub conv1: ConvUnit,
    pub encoder: Vec<AsbLayer>,
    pub decoder: Vec<DecoderBlock>,
    pub head_1x1: ConvUnit,
    pub head_3x3: ConvUnit,
}

/// Intermediates of [`Network::forward_train`].
#[derive(Debug, Clone)]
pub struct TrainCache {
    conv1: ConvUnitCache,
    encoder: Vec<AsbCache>,
    /// Pools indexed by stage index (0 = conv1).
    pools: Vec<Option<Pooled>>,
    decoder: Vec<DecoderCache>,
    head_1x1: ConvUnitCache,
    head_3x3: ConvUnitCache,
    head_shape: Shape,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    up_from: Shape,
    up_channels: usize,
    skip_proj: ConvUnitCache,
    merge: ConvUnitCache,
    asb: AsbCache,
}

impl TrainCache {
    /// Hash of every ReLU on/off state and max-pool argmax. Two forward passes
    /// with equal signatures lie on the same smooth piece of the network.
    pub fn switch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.conv1.hash_switches(&mut h);
        for c in &self.encoder {
            c.hash_switches(&mut h);
        }
        for p in self.pools.iter().flatten() {
            p.argmax.hash(&mut h);
        }
        for d in &self.decoder {
            d.skip_proj.hash_switches(&mut h);
            d.merge.hash_switches(&mut h);
            d.asb.hash_switches(&mut h);
        }
        self.head_1x1.hash_switches(&mut h);
        h.finish()
    }
}

impl Network {
    /// Builds the graph with zero weights and default batch-norm state.
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let bn = spec.batchnorm;
        let c1 = spec.conv1;
        let conv1 = ConvUnit::new(
            "conv1",
            spec.input_shape.0,
            c1.filters,
            c1.kernel,
            c1.stride,
            1,
            bn,
            true,
        )?;
        let mut ch = c1.filters;
        let mut encoder = Vec::with_capacity(ENCODER_DEPTH);
        for i in 1..=ENCODER_DEPTH {
            let cfg = spec.encoder_config(i);
            encoder.push(AsbLayer::new(Stage::Asb(i).unit_prefix(), ch, cfg)?);
            ch = cfg.out_channels();
        }
        let mut decoder = Vec::new();
        for (j, st) in spec.decoder.stages.iter().enumerate() {
            let p = dec_prefix(j);
            let skip_ch = spec.stage_channels(st.skip);
            let skip_proj = ConvUnit::new(
                format!("{p}.skip_proj"),
                skip_ch,
                st.skip_proj,
                1,
                1,
                1,
                bn,
                true,
            )?;
            let merge = ConvUnit::new(
                format!("{p}.merge"),
                ch + st.skip_proj,
                st.merge,
                1,
                1,
                1,
                bn,
                true,
            )?;
            let cfg = spec.decoder_config(j);
            let asb = AsbLayer::new(format!("{p}.asb"), st.merge, cfg)?;
            ch = cfg.out_channels();
            decoder.push(DecoderBlock {
                skip_proj,
                merge,
                asb,
            });
        }
        let d = &spec.decoder;
        let head_1x1 = ConvUnit::new("head.conv1x1", ch, d.head_1x1, 1, 1, 1, bn, true)?;
        let head_3x3 = ConvUnit::new(
            "head.conv3x3",
            d.head_1x1,
            d.head_3x3,
            3,
            1,
            1,
            false,
            false,
        )?;
        Ok(Network {
            spec: spec.clone(),
            conv1,
            encoder,
            decoder,
            head_1x1,
            head_3x3,
        })
    }

    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Network::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for u in net.units_mut() {
            u.init(&mut rng);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Convolution units in topological order.
    pub fn units(&self) -> Vec<&ConvUnit> {
        let mut v = vec![&self.conv1];
        for l in &self.encoder {
            v.extend(l.units());
        }
        for d in &self.decoder {
            v.push(&d.skip_proj);
            v.push(&d.merge);
            v.extend(d.asb.units());
        }
        v.push(&self.head_1x1);
        v.push(&self.head_3x3);
        v
    }

    pub fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut v = vec![&mut self.conv1];
        for l in &mut self.encoder {
            v.push(&mut l.squeeze);
            v.extend(l.branches.iter_mut().flatten());
        }
        for d in &mut self.decoder {
            v.push(&mut d.skip_proj);
            v.push(&mut d.merge);
            v.push(&mut d.asb.squeeze);
            v.extend(d.asb.branches.iter_mut().flatten());
        }
        v.push(&mut self.head_1x1);
        v.push(&mut self.head_3x3);
        v
    }

    pub fn unit(&self, name: &str) -> Option<&ConvUnit> {
        self.units().into_iter().find(|u| u.name == name)
    }

    /// Trainable scalar count, enumerated from the weight arrays.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, role, t| {
            if role.trainable() {
                n += t.len();
            }
        });
        n
    }

    fn exec_float(&self) -> impl FnMut(&str, &Tensor) -> Result<Tensor> + '_ {
        move |name, t| {
            self.unit(name)
                .ok_or_else(|| Error::config(format!("no unit named {name}")))?
                .forward(t)
        }
    }

    pub fn encoder_forward(&self, x: &Tensor) -> Result<(Tensor, Skips)> {
        encoder_graph(&self.spec, x, &mut self.exec_float())
    }

    /// Decoder and head; returns the sigmoid mask at `out_hw`.
    pub fn decoder_forward(
        &self,
        bottleneck: &Tensor,
        skips: &[(Stage, Tensor)],
        out_hw: (usize, usize),
    ) -> Result<Tensor> {
        let z = decoder_graph(
            &self.spec,
            bottleneck,
            skips,
            out_hw,
            &mut self.exec_float(),
        )?;
        Ok(sigmoid(&z))
    }

    /// Inference-mode logits at input resolution.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        forward_graph(&self.spec, x, &mut self.exec_float())
    }

    /// Inference-mode probability mask, shape (batch, 1, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.forward_logits(x)?))
    }

    /// Training-mode forward (batch statistics, running stats updated);
    /// returns logits at input resolution.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, TrainCache)> {
        check_input(&self.spec, x)?;
        let mut pools: Vec<Option<Pooled>> = vec![None; ENCODER_DEPTH + 1];
        let mut skips: Vec<Option<Tensor>> = vec![None; ENCODER_DEPTH + 1];
        let (mut h, conv1) = self.conv1.forward_train(x)?;
        let mut enc = Vec::with_capacity(ENCODER_DEPTH);
        for idx in 0..=ENCODER_DEPTH {
            if idx > 0 {
                let (y, c) = self.encoder[idx - 1].forward_train(&h)?;
                h = y;
                enc.push(c);
            }
            if self.spec.pools_after(Stage::from_index(idx)) {
                let p = maxpool_forward(&h, PoolParams::halving())?;
                skips[idx] = Some(std::mem::replace(&mut h, p.output.clone()));
                pools[idx] = Some(p);
            }
        }
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (st, block) in self.spec.decoder.stages.iter().zip(self.decoder.iter_mut()) {
            let skip = skips[st.skip.index()]
                .as_ref()
                .ok_or_else(|| Error::shape(format!("missing skip output for {}", st.skip)))?;
            let ss = skip.shape();
            let up = bilinear_resize(&h, ss.height, ss.width)?;
            let (proj, pc) = block.skip_proj.forward_train(skip)?;
            let (m, mc) = block
                .merge
                .forward_train(&concat_channels(&[&up, &proj])?)?;
            let (y, ac) = block.asb.forward_train(&m)?;
            dec.push(DecoderCache {
                up_from: h.shape(),
                up_channels: up.shape().channels,
                skip_proj: pc,
                merge: mc,
                asb: ac,
            });
            h = y;
        }
        let (h1, hc1) = self.head_1x1.forward_train(&h)?;
        let (z, hc3) = self.head_3x3.forward_train(&h1)?;
        let s = x.shape();
        let logits = bilinear_resize(&z, s.height, s.width)?;
        Ok((
            logits,
            TrainCache {
                conv1,
                encoder: enc,
                pools,
                decoder: dec,
                head_1x1: hc1,
                head_3x3: hc3,
                head_shape: z.shape(),
            },
        ))
    }

    /// Back-propagates `grad_logits`, accumulating every parameter gradient.
    /// Returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &TrainCache, grad_logits: &Tensor) -> Result<Tensor> {
        let g = bilinear_resize_backward(cache.head_shape, grad_logits)?;
        let g = self.head_3x3.backward(&cache.head_3x3, &g)?;
        let mut g = self.head_1x1.backward(&cache.head_1x1, &g)?;
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; ENCODER_DEPTH + 1];
        for (j, block) in self.decoder.iter_mut().enumerate().rev() {
            let c = &cache.decoder[j];
            let gm = block.asb.backward(&c.asb, &g)?;
            let gcat = block.merge.backward(&c.merge, &gm)?;
            let proj_ch = gcat.shape().channels - c.up_channels;
            let parts = split_channels(&gcat, &[c.up_channels, proj_ch])?;
            let gskip = block.skip_proj.backward(&c.skip_proj, &parts[1])?;
            let idx = self.spec.decoder.stages[j].skip.index();
            match skip_grads[idx].as_mut() {
                Some(acc) => add_into(acc, &gskip),
                None => skip_grads[idx] = Some(gskip),
            }
            g = bilinear_resize_backward(c.up_from, &parts[0])?;
        }
        for idx in (0..=ENCODER_DEPTH).rev() {
            if let Some(p) = &cache.pools[idx] {
                g = maxpool_backward(p, &g)?;
            }
            if let Some(sg) = &skip_grads[idx] {
                add_into(&mut g, sg);
            }
            g = if idx == 0 {
                self.conv1.backward(&cache.conv1, &g)?
            } else {
                self.encoder[idx - 1].backward(&cache.encoder[idx - 1], &g)?
            };
        }
        Ok(g)
    }

    /// Rounds every stored value to the nearest `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        self.visit_params_mut(&mut |_, _, t| {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        });
    }

    /// (name, role, dims) for every stored tensor in topological order.
    pub fn shape_table(&self) -> Vec<(String, ParamRole, Vec<usize>)> {
        let mut v = Vec::new();
        self.visit_params(&mut |n, r, t| v.push((n.to_string(), r, r.dims(t))));
        v
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    acc.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, b)| *a += b);
}

impl Parameters for Network {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        for u in self.units() {
            u.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        for u in self.units_mut() {
            u.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::Scaling;

    fn input(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_fn(shape, |b, c, y, x| {
            ((b * 7 + c * 3 + y * 5 + x) as f64 * 0.37).sin()
        })
        .unwrap()
    }

    #[test]
    fn encoder_shapes_and_skips() {
        let spec = NetworkSpec::default_for(Scaling::Sixteenth);
        let net = Network::build(&spec, 1).unwrap();
        let (b, skips) = net.encoder_forward(&input((1, 3, 64, 32))).unwrap();
        assert_eq!(b.shape(), Shape::new(1, 96, 4, 2));
        let got: Vec<(Stage, Shape)> = skips.iter().map(|(s, t)| (*s, t.shape())).collect();
        assert_eq!(
            got,
            vec![
                (Stage::Conv1, Shape::new(1, 16, 32, 16)),
                (Stage::Asb(3), Shape::new(1, 48, 16, 8)),
                (Stage::Asb(5), Shape::new(1, 64, 8, 4)),
            ]
        );
        assert!(net.encoder_forward(&input((1, 3, 40, 32))).is_err());
    }

    #[test]
    fn train_forward_matches_graph_without_batchnorm() {
        let mut spec = NetworkSpec::default_for(Scaling::Eighth);
        spec.batchnorm = false;
        let mut net = Network::build(&spec, 2).unwrap();
        let x = input((2, 3, 32, 32));
        let a = net.forward_logits(&x).unwrap();
        let (b, _) = net.forward_train(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_names_are_unique_and_ordered() {
        let net = Network::build(&NetworkSpec::default_for(Scaling::Sixteenth), 0).unwrap();
        let names: Vec<&str> = net.units().iter().map(|u| u.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "conv1");
        assert_eq!(names[1], "enc1.squeeze");
        assert_eq!(names[names.len() - 1], "head.conv3x3");
        assert!(names.contains(&"dec1.skip_proj"));
        assert!(names.contains(&"dec3.asb.atrous3x3"));
    }
}
