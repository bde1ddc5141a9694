use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use logistic_vb::bound::{eta, eta_with_gradient, jj_expected_bound, jj_optimal_t, quad_expectation, GaussianMoment, TruncationOrder};

fn moments() -> Vec<GaussianMoment> {
    let mut out = Vec::new();
    for i in 0..61 {
        for j in 0..30 {
            let theta = -3.0 + 0.1 * i as f64;
            let tau = 0.1 + 0.1 * j as f64;
            out.push(GaussianMoment::new(theta, tau).unwrap());
        }
    }
    out
}

fn bench_bound(c: &mut Criterion) {
    let grid = moments();
    let mut group = c.benchmark_group("grid");
    for l in [6u32, 12, 24] {
        let order = TruncationOrder::new(l).unwrap();
        group.bench_with_input(BenchmarkId::new("eta", l), &order, |b, &order| {
            b.iter(|| grid.iter().map(|&m| eta(black_box(m), order)).sum::<f64>())
        });
        group.bench_with_input(BenchmarkId::new("eta_with_gradient", l), &order, |b, &order| {
            b.iter(|| grid.iter().map(|&m| eta_with_gradient(black_box(m), order).0).sum::<f64>())
        });
    }
    group.bench_function("jj", |b| {
        b.iter(|| grid.iter().map(|&m| jj_expected_bound(black_box(m), jj_optimal_t(m))).sum::<f64>())
    });
    group.bench_function("quadrature_200", |b| {
        b.iter(|| grid.iter().map(|&m| quad_expectation(black_box(m), 200).unwrap()).sum::<f64>())
    });
    group.finish();
}

criterion_group!(benches, bench_bound);
criterion_main!(benches);
