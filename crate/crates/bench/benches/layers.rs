//! Per-op throughput: convolution, ASB layer, pooling, resize, int8 conv.

use asbunet::asb::{AsbConfig, AsbLayer};
use asbunet::layers::ConvUnit;
use asbunet::ops::{
    bilinear_resize, conv2d_backward, conv2d_forward, maxpool_forward, ConvParams, PoolParams,
};
use asbunet::quant::{QuantConv, QuantParams};
use asbunet::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn input(c: usize, hw: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn((1, c, hw, hw), |_, _, _, _| rng.random_range(0.0..1.0)).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = input(32, 32, &mut rng);
    for dilation in [1, 4] {
        let mut p = ConvParams::zeros_same(32, 32, 3, 1, dilation).unwrap();
        p.weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.1..0.1));
        c.bench_function(&format!("conv3x3 32ch 32x32 d{dilation} forward"), |b| {
            b.iter(|| conv2d_forward(black_box(&x), &p).unwrap())
        });
        let y = conv2d_forward(&x, &p).unwrap();
        c.bench_function(&format!("conv3x3 32ch 32x32 d{dilation} backward"), |b| {
            b.iter(|| conv2d_backward(black_box(&x), &p, &y).unwrap())
        });
    }
}

fn asb(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut layer = AsbLayer::new("asb", 32, AsbConfig::new(16, 16, 8, 8, 3).unwrap()).unwrap();
    layer.init(&mut rng);
    let x = input(32, 32, &mut rng);
    c.bench_function("asb 32ch 32x32 inference", |b| {
        b.iter(|| layer.forward(black_box(&x)).unwrap())
    });
    c.bench_function("asb 32ch 32x32 train step", |b| {
        b.iter(|| {
            let (y, cache) = layer.forward_train(black_box(&x)).unwrap();
            layer.backward(&cache, &y).unwrap()
        })
    });
}

fn pool_resize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = input(16, 64, &mut rng);
    c.bench_function("maxpool 16ch 64x64", |b| {
        b.iter(|| maxpool_forward(black_box(&x), PoolParams::halving()).unwrap())
    });
    c.bench_function("bilinear 16ch 64x64 -> 128x128", |b| {
        b.iter(|| bilinear_resize(black_box(&x), 128, 128).unwrap())
    });
}

fn int8_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut unit = ConvUnit::new("q", 32, 32, 3, 1, 2, false, true).unwrap();
    unit.init(&mut rng);
    let x = input(32, 32, &mut rng);
    let q = QuantConv::from_unit(&unit, QuantParams::affine(0.0, 1.0));
    c.bench_function("int8 conv3x3 32ch 32x32 d2", |b| {
        b.iter(|| q.forward(black_box(&x)).unwrap())
    });
}

criterion_group!(benches, conv, asb, pool_resize, int8_conv);
criterion_main!(benches);
