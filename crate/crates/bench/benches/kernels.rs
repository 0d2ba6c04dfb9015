use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wos_core::kernels::BallKernel;
use wos_core::specfun::{i0, k0};
use wos_core::{Dim, Vec3};

fn bessel(c: &mut Criterion) {
    let mut g = c.benchmark_group("bessel");
    for x in [0.5, 5.0, 50.0] {
        g.bench_with_input(BenchmarkId::new("i0", x), &x, |b, &x| b.iter(|| i0(black_box(x))));
        g.bench_with_input(BenchmarkId::new("k0", x), &x, |b, &x| b.iter(|| k0(black_box(x))));
    }
    g.finish();
}

fn ball_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("ball");
    for (dim, name) in [(Dim::Two, "2d"), (Dim::Three, "3d")] {
        let k = BallKernel::new(dim, Vec3::ZERO, 1.0, 25.0).unwrap();
        let x = match dim {
            Dim::Two => Vec3::new2(0.3, -0.2),
            Dim::Three => Vec3::new(0.3, -0.2, 0.1),
        };
        let y = x * -1.5;
        let z = x / x.norm();
        g.bench_function(BenchmarkId::new("green_norm", name), |b| b.iter(|| black_box(&k).green_norm()));
        g.bench_function(BenchmarkId::new("green_offcentered", name), |b| b.iter(|| k.green_offcentered(black_box(x), black_box(y)).unwrap()));
        g.bench_function(BenchmarkId::new("poisson_offcentered", name), |b| b.iter(|| k.poisson_offcentered(black_box(x), black_box(z)).unwrap()));
        g.bench_function(BenchmarkId::new("green_offcentered_approx", name), |b| b.iter(|| k.green_offcentered_approx(black_box(x), black_box(y)).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        g.bench_function(BenchmarkId::new("sample_green_centered", name), |b| b.iter(|| k.sample_green_centered(&mut rng).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bessel, ball_kernels);
criterion_main!(benches);
