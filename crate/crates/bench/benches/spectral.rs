use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sift_bench::{conditioned, gaussian, low_rank};
use sift_core::merge::{interference_free_merge, TaskVector};
use sift_core::spectral::{compact_svd, msign_exact, msign_newton_schulz_with, NsSchedule, DEFAULT_RANK_TOL};
use sift_core::sift_direction;
use std::hint::black_box;

const SHAPES: [(usize, usize); 3] = [(32, 32), (64, 32), (128, 64)];

fn msign(c: &mut Criterion) {
    let mut group = c.benchmark_group("msign");
    for (rows, cols) in SHAPES {
        let m = conditioned(rows, cols, 100.0, 7);
        let id = format!("{rows}x{cols}");
        group.bench_with_input(BenchmarkId::new("newton_schulz_nonic", &id), &m, |b, m| {
            b.iter(|| msign_newton_schulz_with(black_box(m), 5, NsSchedule::Nonic).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("newton_schulz_quintic", &id), &m, |b, m| {
            b.iter(|| msign_newton_schulz_with(black_box(m), 5, NsSchedule::MuonQuintic).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("exact", &id), &m, |b, m| {
            b.iter(|| msign_exact(black_box(m)).unwrap())
        });
    }
    group.finish();
}

fn svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("compact_svd");
    for (rows, cols) in SHAPES {
        let m = gaussian(rows, cols, 11);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &m, |b, m| {
            b.iter(|| compact_svd(black_box(m), DEFAULT_RANK_TOL).unwrap())
        });
    }
    group.finish();
}

fn direction(c: &mut Criterion) {
    let mut group = c.benchmark_group("sift_direction");
    let (mf, mg) = (gaussian(64, 32, 1), gaussian(64, 32, 2));
    for k in [4, 16, 32] {
        group.bench_with_input(BenchmarkId::new("64x32", k), &k, |b, &k| {
            b.iter(|| sift_direction(black_box(&mf), black_box(&mg), k, 5).unwrap())
        });
    }
    group.finish();
}

fn merge(c: &mut Criterion) {
    let tv = |seed| TaskVector::new(vec![("w".into(), low_rank(64, 48, 4, seed))]).unwrap();
    let (df, dg) = (tv(1), tv(5));
    c.bench_function("whitened_merge/64x48_rank4", |b| {
        b.iter(|| interference_free_merge(black_box(&df), black_box(&dg)).unwrap())
    });
}

criterion_group!(benches, msign, svd, direction, merge);
criterion_main!(benches);
