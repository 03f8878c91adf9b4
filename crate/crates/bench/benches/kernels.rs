use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vle_bench::{image_batch, tensor};
use vle_core::conv::{conv2d_backward, conv2d_forward};
use vle_core::metrics::{shannon_entropy, ssim};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(ch, size) in &[(8usize, 32usize), (32, 32), (64, 8)] {
        let x = tensor(&[16, ch, size, size]);
        let w = tensor(&[ch, ch, 3, 3]);
        let b = tensor(&[ch]);
        let id = format!("{ch}ch_{size}px");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| conv2d_forward(black_box(&x), &w, Some(&b), 1, 1).unwrap())
        });
        let dy = conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bench, _| {
            bench.iter(|| conv2d_backward(black_box(&x), &w, &dy, 1, 1, true, true, true).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let x = image_batch(1, 64);
    let y = image_batch(1, 64).tensor().map(|v| (v * 0.9 + 0.05).min(1.0));
    c.bench_function("ssim_64px", |b| b.iter(|| ssim(black_box(x.tensor()), &y).unwrap()));
    c.bench_function("entropy_64px", |b| b.iter(|| shannon_entropy(black_box(x.tensor())).unwrap()));
}

criterion_group!(benches, conv, metrics);
criterion_main!(benches);
