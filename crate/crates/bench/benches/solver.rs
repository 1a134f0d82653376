use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sinkhorn_clt::operators::{center, Side};
use sinkhorn_clt::{build_operators, h0_limit_spectrum, solve, DiscreteMeasure, SolverOptions};

fn cloud(n: usize, dim: usize, seed: u64) -> DiscreteMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    DiscreteMeasure::new(points, weights.into_iter().map(|w| w / total).collect()).unwrap()
}

fn bench_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    for &n in &[10usize, 50, 200] {
        let p = cloud(n, 2, 1);
        let q = cloud(n, 2, 2);
        for &eps in &[1.0, 0.1] {
            group.bench_with_input(BenchmarkId::new(format!("eps={eps}"), n), &n, |b, _| {
                b.iter(|| solve(&p, &q, eps, SolverOptions::default()).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_resolvent(c: &mut Criterion) {
    let mut group = c.benchmark_group("resolvent");
    for &n in &[10usize, 50, 200] {
        let p = cloud(n, 2, 3);
        let q = cloud(n, 2, 4);
        let sol = solve(&p, &q, 0.5, SolverOptions::default()).unwrap();
        let ops = build_operators(&sol, &p, &q);
        let w = DVector::from_column_slice(p.weights());
        let v = center(&DVector::from_fn(n, |i, _| (i as f64).sin()), &w);
        group.bench_with_input(BenchmarkId::new("factor+solve", n), &n, |b, _| {
            b.iter(|| ops.resolvent(Side::X).unwrap().solve(&v).unwrap())
        });
    }
    group.finish();
}

fn bench_h0_spectrum(c: &mut Criterion) {
    let mut group = c.benchmark_group("h0_spectrum");
    group.sample_size(20);
    for &n in &[10usize, 50, 100] {
        let p = cloud(n, 2, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| h0_limit_spectrum(&p, 1.0, SolverOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_solve, bench_resolvent, bench_h0_spectrum);
criterion_main!(benches);
