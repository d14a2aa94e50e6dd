use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchwork_bench::{dataset, hyper};
use patchwork_core::sparse_linalg::{chol_sparse, rcm_order};
use patchwork_core::{neg_log_marginal, Partitioned, PatchworkModel};

const N: usize = 4000;

fn fit(c: &mut Criterion) {
    let data = dataset(N, 2, 1);
    let hyper = hyper();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for k in [8, 16, 32, 64] {
        group.bench_with_input(BenchmarkId::new("regions", k), &k, |b, &k| {
            b.iter(|| PatchworkModel::fit(&data.x, &data.y, k, 5, &hyper, 0).unwrap())
        });
    }
    for pseudo in [0, 5, 10, 20] {
        group.bench_with_input(BenchmarkId::new("pseudo_points", pseudo), &pseudo, |b, &pseudo| {
            b.iter(|| PatchworkModel::fit(&data.x, &data.y, 16, pseudo, &hyper, 0).unwrap())
        });
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let data = dataset(N, 2, 2);
    let model = PatchworkModel::fit(&data.x, &data.y, 16, 7, &hyper(), 0).unwrap();
    let queries: Vec<[f64; 2]> = (0..64).map(|i| [0.15 * i as f64, 10.0 - 0.15 * i as f64]).collect();
    c.bench_function("predict/64_points", |b| {
        b.iter(|| {
            for q in &queries {
                black_box(model.predict(q).unwrap());
            }
        })
    });
}

fn schur(c: &mut Criterion) {
    let data = dataset(N, 2, 3);
    let model = PatchworkModel::fit(&data.x, &data.y, 64, 7, &hyper(), 0).unwrap();
    let s = model.factorization().schur_matrix();
    let jitter = model.factorization().jitter();
    c.bench_function("schur/rcm_order", |b| b.iter(|| rcm_order(black_box(s))));
    let perm = rcm_order(s);
    let permuted = s.permute(&perm);
    c.bench_function("schur/envelope_cholesky", |b| b.iter(|| chol_sparse(black_box(&permuted), jitter).unwrap()));
}

fn likelihood(c: &mut Criterion) {
    let data = dataset(N, 2, 4);
    let part = Partitioned::new(&data.x, &data.y, 16, 5, 0).unwrap();
    let hyper = hyper();
    let mut group = c.benchmark_group("likelihood");
    group.sample_size(10);
    group.bench_function("evaluate", |b| b.iter(|| neg_log_marginal(&hyper, &part).unwrap()));
    group.finish();
}

criterion_group!(benches, fit, predict, schur, likelihood);
criterion_main!(benches);
