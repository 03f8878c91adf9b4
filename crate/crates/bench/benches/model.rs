use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vle_bench::{codec, image_batch};
use vle_core::engine::Variant;
use vle_core::training::{train_step, Adam, StepOptions};
use vle_core::{run_masked, run_vanilla, CodecConfig, LossConfig};

fn unroll(c: &mut Criterion) {
    let x = image_batch(8, 32);
    let vanilla = codec(CodecConfig::default());
    let masked = codec(CodecConfig {
        mask_enabled: true,
        ..CodecConfig::default()
    });
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for n in [1, 4] {
        group.bench_with_input(BenchmarkId::new("vanilla", n), &n, |b, &n| {
            b.iter(|| run_vanilla(&vanilla, black_box(&x), n).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("masked", n), &n, |b, &n| {
            b.iter(|| run_masked(&masked, black_box(&x), n.max(2)).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let x = image_batch(8, 32);
    let config = CodecConfig {
        base_channels: 8,
        residual_blocks_per_level: 1,
        ..CodecConfig::default()
    };
    let mut model = codec(config);
    let mut opt = Adam::new(Default::default(), model.params().tensors());
    let options = StepOptions {
        loss: LossConfig::default(),
        detach_steps: false,
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for n in [1, 4] {
        group.bench_with_input(BenchmarkId::new("vanilla_base8", n), &n, |b, &n| {
            b.iter(|| train_step(&mut model, &mut opt, black_box(&x), n, Variant::Vanilla, options).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, unroll, training);
criterion_main!(benches);
