//! Post-training int8 quantization.
//!
//! Weights use per-tensor symmetric int8 (`scale = max|w| / 127`), activations
//! entering each convolution use per-tensor affine uint8 from the min/max seen
//! during calibration. Batch norm is folded into the preceding convolution
//! first. Convolutions accumulate `(q_x − zp_x)·q_w` in `i32` and rescale the
//! sum by `scale_x·scale_w` in floating point; pooling, resizing,
//! concatenation and the sigmoid stay in float.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::checkpoint::{Container, Entry, Payload, VERSION_INT8};
use crate::error::{Error, Result};
use crate::layers::ConvUnit;
use crate::network::{forward_graph, Network};
use crate::ops::{sigmoid, Padding};
use crate::spec::NetworkSpec;
use crate::tensor::{Shape, Tensor};

/// Smallest scale ever produced, so all-zero tensors still quantize.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    SymmetricInt8,
    AffineUint8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub scheme: Scheme,
}

impl QuantParams {
    /// Symmetric int8 covering `[−max_abs, max_abs]`.
    pub fn symmetric(max_abs: f64) -> Self {
        QuantParams {
            scale: (max_abs / 127.0).max(MIN_SCALE),
            zero_point: 0,
            scheme: Scheme::SymmetricInt8,
        }
    }

    /// Affine uint8 covering `[min, max]` widened to include 0.
    pub fn affine(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / 255.0).max(MIN_SCALE);
        QuantParams {
            scale,
            zero_point: ((-lo / scale).round() as i32).clamp(0, 255),
            scheme: Scheme::AffineUint8,
        }
    }

    pub fn range(&self) -> (i32, i32) {
        match self.scheme {
            Scheme::SymmetricInt8 => (-127, 127),
            Scheme::AffineUint8 => (0, 255),
        }
    }

    pub fn quantize(&self, x: f64) -> i32 {
        let (lo, hi) = self.range();
        let q = (x / self.scale).round() + self.zero_point as f64;
        (q.clamp(lo as f64, hi as f64)) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    pub fn quantize_slice(&self, x: &[f64]) -> Vec<i32> {
        x.iter().map(|&v| self.quantize(v)).collect()
    }

    pub fn dequantize_slice(&self, q: &[i32]) -> Vec<f64> {
        q.iter().map(|&v| self.dequantize(v)).collect()
    }

    /// Rounds the scale to `f32`, the precision stored in checkpoints.
    pub fn stored(mut self) -> Self {
        self.scale = (self.scale as f32) as f64;
        self
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range();
        if !(self.scale > 0.0 && self.scale.is_finite())
            || self.zero_point < lo
            || self.zero_point > hi
        {
            return Err(Error::Quant(format!(
                "invalid quantization parameters {self:?}"
            )));
        }
        if self.scheme == Scheme::SymmetricInt8 && self.zero_point != 0 {
            return Err(Error::Quant("symmetric scheme needs zero point 0".into()));
        }
        Ok(())
    }
}

/// Running min/max of the input to every convolution unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calibration {
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub samples: usize,
}

impl Calibration {
    pub fn observe(&mut self, unit: &str, x: &Tensor) {
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let e = self.ranges.entry(unit.to_string()).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    pub fn params(&self, unit: &str) -> Result<QuantParams> {
        self.ranges
            .get(unit)
            .map(|&(lo, hi)| QuantParams::affine(lo, hi))
            .ok_or_else(|| Error::Quant(format!("no calibration range for {unit}")))
    }
}

/// Float forward passes over `inputs`, recording activation ranges.
pub fn calibrate(net: &Network, inputs: &[Tensor]) -> Result<Calibration> {
    if inputs.is_empty() {
        return Err(Error::Quant("calibration needs at least one input".into()));
    }
    let mut cal = Calibration::default();
    for x in inputs {
        forward_graph(net.spec(), x, &mut |name, t| {
            cal.observe(name, t);
            net.unit(name)
                .ok_or_else(|| Error::config(format!("no unit named {name}")))?
                .forward(t)
        })?;
        cal.samples += x.shape().batch;
    }
    Ok(cal)
}

/// A convolution with batch norm folded in, in integer form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConv {
    pub name: String,
    /// (out, in, kh, kw)
    pub dims: [usize; 4],
    pub weight: Vec<i8>,
    pub weight_qp: QuantParams,
    pub bias: Vec<i8>,
    pub bias_qp: QuantParams,
    pub input_qp: QuantParams,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub relu: bool,
}

/// Folded float weight and bias of a unit (BN absorbed).
pub fn fold_batchnorm(u: &ConvUnit) -> (Vec<f64>, Vec<f64>) {
    let mut w = u.conv.weight.data().to_vec();
    let mut b = u.conv.bias.data().to_vec();
    if let Some(bn) = &u.bn {
        let per_out = w.len() / b.len();
        for (o, (scale, shift)) in bn.inference_affine().into_iter().enumerate() {
            w[o * per_out..(o + 1) * per_out]
                .iter_mut()
                .for_each(|v| *v *= scale);
            b[o] = b[o] * scale + shift;
        }
    }
    (w, b)
}

fn to_i8(q: Vec<i32>) -> Vec<i8> {
    q.into_iter().map(|v| v as i8).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl QuantConv {
    pub fn from_unit(u: &ConvUnit, input_qp: QuantParams) -> Self {
        let (w, b) = fold_batchnorm(u);
        let weight_qp = QuantParams::symmetric(max_abs(&w)).stored();
        let bias_qp = QuantParams::symmetric(max_abs(&b)).stored();
        let input_qp = input_qp.stored();
        QuantConv {
            name: u.name.clone(),
            dims: u.conv.weight.shape().dims(),
            weight: to_i8(weight_qp.quantize_slice(&w)),
            weight_qp,
            bias: to_i8(bias_qp.quantize_slice(&b)),
            bias_qp,
            input_qp,
            stride: u.conv.stride,
            dilation: u.conv.dilation,
            padding: u.conv.padding,
            relu: u.relu,
        }
    }

    /// Quantizes `x`, convolves with integer accumulation and returns the
    /// rescaled float output.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [oc, ic, kh, kw] = self.dims;
        let s = x.shape();
        if s.channels != ic {
            return Err(Error::shape(format!(
                "{} expects {ic} channels, got {}",
                self.name, s.channels
            )));
        }
        let ph = s.height + self.padding.top + self.padding.bottom;
        let pw = s.width + self.padding.left + self.padding.right;
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        if ph < span_h || pw < span_w {
            return Err(Error::shape(format!(
                "{}: kernel exceeds padded input",
                self.name
            )));
        }
        let oh = (ph - span_h) / self.stride + 1;
        let ow = (pw - span_w) / self.stride + 1;
        let zp = self.input_qp.zero_point;
        let xq: Vec<i32> = x
            .data()
            .iter()
            .map(|&v| self.input_qp.quantize(v) - zp)
            .collect();
        let plane = s.height * s.width;
        let out_shape = Shape::new(s.batch, oc, oh, ow);
        let mut out = Vec::with_capacity(out_shape.len());
        let mut acc = vec![0i32; oh * ow];
        let rescale = self.input_qp.scale * self.weight_qp.scale;
        // output row/col → input coordinate for each tap, None when in padding
        let src = |o: usize, k: usize, pad: usize, n: usize| {
            let p = o * self.stride + k * self.dilation;
            (p >= pad && p - pad < n).then(|| p - pad)
        };
        for b in 0..s.batch {
            let item = &xq[b * ic * plane..(b + 1) * ic * plane];
            for o in 0..oc {
                acc.fill(0);
                for c in 0..ic {
                    let xp = &item[c * plane..(c + 1) * plane];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wq = self.weight[((o * ic + c) * kh + ky) * kw + kx] as i32;
                            if wq == 0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let Some(iy) = src(oy, ky, self.padding.top, s.height) else {
                                    continue;
                                };
                                let row = &xp[iy * s.width..(iy + 1) * s.width];
                                let arow = &mut acc[oy * ow..(oy + 1) * ow];
                                if self.stride == 1 {
                                    // contiguous span of valid columns
                                    let lo = (self.padding.left.saturating_sub(kx * self.dilation))
                                        .min(ow);
                                    let hi = (s.width + self.padding.left)
                                        .saturating_sub(kx * self.dilation)
                                        .min(ow);
                                    if lo < hi {
                                        let ix0 = lo + kx * self.dilation - self.padding.left;
                                        for (a, &v) in
                                            arow[lo..hi].iter_mut().zip(&row[ix0..ix0 + (hi - lo)])
                                        {
                                            *a += wq * v;
                                        }
                                    }
                                } else {
                                    for (ox, a) in arow.iter_mut().enumerate() {
                                        if let Some(ix) = src(ox, kx, self.padding.left, s.width) {
                                            *a += wq * row[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let bias = self.bias_qp.dequantize(self.bias[o] as i32);
                out.extend(acc.iter().map(|&a| {
                    let y = a as f64 * rescale + bias;
                    if self.relu {
                        y.max(0.0)
                    } else {
                        y
                    }
                }));
            }
        }
        Tensor::from_vec(out_shape, out)
    }
}

/// Integer-weight network sharing the float graph structure.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    spec: NetworkSpec,
    pub units: Vec<QuantConv>,
}

impl QuantizedNetwork {
    pub fn from_network(net: &Network, cal: &Calibration) -> Result<Self> {
        let units = net
            .units()
            .into_iter()
            .map(|u| Ok(QuantConv::from_unit(u, cal.params(&u.name)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantizedNetwork {
            spec: net.spec().clone(),
            units,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn unit(&self, name: &str) -> Option<&QuantConv> {
        self.units.iter().find(|u| u.name == name)
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        forward_graph(&self.spec, x, &mut |name, t| {
            self.unit(name)
                .ok_or_else(|| Error::Quant(format!("no quantized unit {name}")))?
                .forward(t)
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.forward_logits(x)?))
    }

    pub fn to_container(&self) -> Container {
        let mut entries = Vec::new();
        for u in &self.units {
            let int8 = |qp: &QuantParams, values: Vec<i8>| Payload::Int8 {
                scale: qp.scale as f32,
                zero_point: qp.zero_point,
                values,
            };
            entries.push(Entry {
                name: format!("{}.weight", u.name),
                dims: u.dims.to_vec(),
                payload: int8(&u.weight_qp, u.weight.clone()),
            });
            entries.push(Entry {
                name: format!("{}.bias", u.name),
                dims: vec![u.bias.len()],
                payload: int8(&u.bias_qp, u.bias.clone()),
            });
            entries.push(Entry {
                name: format!("{}.act", u.name),
                dims: vec![],
                payload: int8(&u.input_qp, vec![0]),
            });
        }
        Container {
            version: VERSION_INT8,
            spec_text: self.spec.to_text(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().encode()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.version != VERSION_INT8 {
            return Err(Error::Format(format!(
                "expected a quantized checkpoint (version {VERSION_INT8}), got version {}",
                c.version
            )));
        }
        let spec = NetworkSpec::from_text(&c.spec_text)?;
        let template = Network::zeroed(&spec)?;
        let units = template.units();
        if c.entries.len() != 3 * units.len() {
            return Err(Error::ShapeTableMismatch(format!(
                "network has {} units, checkpoint has {} entries",
                units.len(),
                c.entries.len()
            )));
        }
        let mut out = Vec::with_capacity(units.len());
        for (u, e) in units.iter().zip(c.entries.chunks_exact(3)) {
            let want = [
                (
                    format!("{}.weight", u.name),
                    u.conv.weight.shape().dims().to_vec(),
                    Scheme::SymmetricInt8,
                ),
                (
                    format!("{}.bias", u.name),
                    vec![u.out_channels()],
                    Scheme::SymmetricInt8,
                ),
                (format!("{}.act", u.name), vec![], Scheme::AffineUint8),
            ];
            let mut parts = Vec::with_capacity(3);
            for ((name, dims, scheme), entry) in want.into_iter().zip(e) {
                if entry.name != name || entry.dims != dims {
                    return Err(Error::ShapeTableMismatch(format!(
                        "expected {name} {dims:?}, found {} {:?}",
                        entry.name, entry.dims
                    )));
                }
                let Payload::Int8 {
                    scale,
                    zero_point,
                    values,
                } = &entry.payload
                else {
                    return Err(Error::Format(format!("{name} is not an int8 entry")));
                };
                let qp = QuantParams {
                    scale: *scale as f64,
                    zero_point: *zero_point,
                    scheme,
                };
                qp.validate()?;
                parts.push((qp, values.clone()));
            }
            let (act, _) = parts.pop().expect("three parts");
            let (bias_qp, bias) = parts.pop().expect("three parts");
            let (weight_qp, weight) = parts.pop().expect("three parts");
            out.push(QuantConv {
                name: u.name.clone(),
                dims: u.conv.weight.shape().dims(),
                weight,
                weight_qp,
                bias,
                bias_qp,
                input_qp: act,
                stride: u.conv.stride,
                dilation: u.conv.dilation,
                padding: u.conv.padding,
                relu: u.relu,
            });
        }
        Ok(QuantizedNetwork { spec, units: out })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        QuantizedNetwork::from_container(&Container::decode(bytes)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        QuantizedNetwork::from_bytes(&fs::read(path)?)
    }
}

/// Mean absolute difference between float and quantized sigmoid outputs.
pub fn mean_abs_deviation(
    net: &Network,
    qnet: &QuantizedNetwork,
    inputs: &[Tensor],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for x in inputs {
        let a = net.forward(x)?;
        let b = qnet.forward(x)?;
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>();
        n += a.len();
    }
    if n == 0 {
        return Err(Error::Quant("no inputs to compare".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::Scaling;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_and_unit_ranges() {
        let z = QuantParams::symmetric(0.0);
        assert_eq!(z.scale, MIN_SCALE);
        assert_eq!(z.quantize(0.0), 0);
        assert_eq!(QuantParams::symmetric(1.0).scale, 1.0 / 127.0);
        let a = QuantParams::affine(0.0, 6.0);
        assert_eq!((a.scale, a.zero_point), (6.0 / 255.0, 0));
        assert_eq!(a.quantize(0.0), a.zero_point);
        let b = QuantParams::affine(-1.0, 3.0);
        assert_eq!(b.quantize(0.0), b.zero_point);
        assert_eq!(b.dequantize(b.zero_point), 0.0);
    }

    #[test]
    fn round_trip_error_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for qp in [QuantParams::symmetric(2.5), QuantParams::affine(-0.7, 4.1)] {
            let lo = qp.dequantize(qp.range().0);
            let hi = qp.dequantize(qp.range().1);
            for _ in 0..2000 {
                let x = rng.random_range(lo..hi);
                let back = qp.dequantize(qp.quantize(x));
                assert!((back - x).abs() <= qp.scale / 2.0 + 1e-15);
                // dequantized values are fixed points
                assert_eq!(qp.dequantize(qp.quantize(back)), back);
            }
            assert_eq!(qp.quantize(1e9), qp.range().1);
            assert_eq!(qp.quantize(-1e9), qp.range().0);
        }
        let s = QuantParams::symmetric(3.0);
        for x in [0.1, 1.7, 2.99, 0.5 * s.scale] {
            assert_eq!(s.quantize(-x), -s.quantize(x));
        }
    }

    #[test]
    fn identity_kernel_reproduces_quantized_input() {
        let mut u = ConvUnit::new("id", 1, 1, 3, 1, 1, false, false).unwrap();
        u.conv.weight.data_mut()[4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn((1, 1, 6, 6), |_, _, _, _| rng.random_range(-1.0..2.0)).unwrap();
        let qp = QuantParams::affine(-1.0, 2.0);
        let q = QuantConv::from_unit(&u, qp);
        let y = q.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= qp.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn integer_conv_matches_float_on_dequantized_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (stride, dil) in [(1, 1), (1, 3), (2, 1)] {
            let mut u = ConvUnit::new("c", 3, 4, 3, stride, dil, true, true).unwrap();
            u.init(&mut rng);
            let qp = QuantParams::affine(0.0, 1.0);
            let q = QuantConv::from_unit(&u, qp);
            let x = Tensor::from_fn((2, 3, 8, 8), |_, _, _, _| rng.random_range(0.0..1.0)).unwrap();
            // float reference on the exact integer grid
            let iq = q.input_qp;
            let xd = x.map(|v| iq.dequantize(iq.quantize(v)));
            let mut f = u.clone();
            f.bn = None;
            f.conv.weight = Tensor::from_vec(
                f.conv.weight.shape(),
                q.weight
                    .iter()
                    .map(|&w| q.weight_qp.dequantize(w as i32))
                    .collect(),
            )
            .unwrap();
            f.conv.bias = Tensor::from_vec(
                f.conv.bias.shape(),
                q.bias
                    .iter()
                    .map(|&b| q.bias_qp.dequantize(b as i32))
                    .collect(),
            )
            .unwrap();
            let want = f.forward(&xd).unwrap();
            let got = q.forward(&x).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_calibration_is_an_error() {
        let net = Network::build(&NetworkSpec::default_for(Scaling::Eighth), 0).unwrap();
        assert!(matches!(
            QuantizedNetwork::from_network(&net, &Calibration::default()),
            Err(Error::Quant(_))
        ));
        assert!(calibrate(&net, &[]).is_err());
    }

    #[test]
    fn quantized_checkpoint_round_trip() {
        let net = Network::build(
            &NetworkSpec::default_for(Scaling::Eighth).with_input(3, 32, 32),
            1,
        )
        .unwrap();
        let x =
            Tensor::from_fn((1, 3, 32, 32), |_, c, y, x| ((c + y * x) % 7) as f64 / 7.0).unwrap();
        let q = QuantizedNetwork::from_network(
            &net,
            &calibrate(&net, std::slice::from_ref(&x)).unwrap(),
        )
        .unwrap();
        let back = QuantizedNetwork::from_bytes(&q.to_bytes().unwrap()).unwrap();
        assert_eq!(back.forward(&x).unwrap(), q.forward(&x).unwrap());
    }
}
