use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use mvd_core::backbone::{build_networks, BackboneConfig, Networks};
use mvd_core::corruption::{sample_spec, CorruptionPool, CorruptionSpec, Kernel};
use mvd_core::dataio::{synthetic, ImageTensor, Split};
use mvd_core::eval::{psnr, ssim};
use mvd_core::rng;
use mvd_core::trainer::{denoise, init_state, train_step, DataSource, Schema, TrainConfig};

fn corruption(c: &mut Criterion) {
    let img = synthetic::toy_image(0, 128);
    let gauss = CorruptionSpec::gaussian(25.0, 1).unwrap();
    let down = CorruptionSpec::downscale(4, Kernel::Bicubic).unwrap();
    let pool = CorruptionPool::noise_pool();
    let mut g = c.benchmark_group("corruption_128px");
    g.bench_function("gaussian", |b| b.iter(|| gauss.apply(black_box(&img)).unwrap()));
    g.bench_function("downscale_x4_bicubic", |b| {
        b.iter(|| down.apply(black_box(&img)).unwrap())
    });
    let mut seed = 0u64;
    g.bench_function("noise_pool_draw", |b| {
        b.iter(|| {
            seed += 1;
            let spec = sample_spec(&pool, &mut rng::stream(seed, &[])).unwrap();
            spec.apply(black_box(&img)).unwrap()
        })
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let clean = synthetic::toy_image(1, 128);
    let noisy = CorruptionSpec::gaussian(25.0, 2).unwrap().apply(&clean).unwrap().image;
    let mut g = c.benchmark_group("metrics_128px");
    g.bench_function("psnr", |b| b.iter(|| psnr(black_box(&noisy), &clean).unwrap()));
    g.bench_function("ssim", |b| b.iter(|| ssim(black_box(&noisy), &clean).unwrap()));
    g.finish();
}

fn inference(c: &mut Criterion) {
    let nets: Networks<f32> = build_networks(&BackboneConfig::conv_small(3, 16), 3).unwrap();
    let img: ImageTensor = synthetic::toy_image(2, 64);
    c.bench_function("denoise_conv_small_64px", |b| {
        b.iter(|| denoise(&nets, black_box(&img), None, None).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_conv_small");
    g.sample_size(10);
    for schema in [Schema::Med, Schema::N2n] {
        let cfg = TrainConfig {
            schema,
            batch: 4,
            patch: 32,
            lr: 1e-3,
            backbone: BackboneConfig::conv_small(3, 16),
            data: Some(DataSource::Toy {
                count: 4,
                size: 64,
                seed: 1,
            }),
            ..TrainConfig::default()
        };
        let data = cfg.data.as_ref().unwrap().load(Split::Train).unwrap();
        let state = init_state(&cfg).unwrap();
        g.bench_function(schema.name(), |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| train_step(&cfg, &data, &mut s, 0).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, corruption, metrics, inference, training);
criterion_main!(benches);
