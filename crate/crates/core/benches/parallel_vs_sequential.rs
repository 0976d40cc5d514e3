use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layered_core::metrics::evaluate;
use layered_core::{Exec, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs(n: usize, size: usize) -> Vec<(Raster, Raster)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| {
            let a = Raster::from_fn(size, size, 3, |_, _, _| rng.random::<f64>());
            let b = a.map(|v| (v + 0.05).min(1.0));
            (a, b)
        })
        .collect()
}

fn metrics_batch(c: &mut Criterion) {
    let data = pairs(16, 64);
    let mut group = c.benchmark_group("metrics_batch");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&data, exec).unwrap())
        });
    }
    group.finish();
}

fn canny_batch(c: &mut Criterion) {
    let images: Vec<Raster> = pairs(8, 96).into_iter().map(|(a, _)| a).collect();
    let params = layered_core::edges::CannyParams::default();
    let mut group = c.benchmark_group("canny_batch");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| exec.map(&images, |im| layered_core::edges::canny(im, &params).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, metrics_batch, canny_batch);
criterion_main!(benches);
