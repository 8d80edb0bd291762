use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use unlearn_core::coherence::mix_coherence_with;
use unlearn_core::dynsim::{run_trajectory, TrajectoryOptions};
use unlearn_core::matker::{lambda_max, psd_sqrt, sym_eig};
use unlearn_core::seed::rng_from_seed;
use unlearn_core::stability::noise_recurrence;
use unlearn_core::synthetic::{build_q_construction, random_rank_one_ensemble, QConstructionSpec};
use unlearn_core::{CoherenceOptions, CoherencePath, SymMatrix, UnlearnConfig};

fn random_psd(d: usize, seed: u64) -> SymMatrix {
    let mut state = seed;
    let mut next = || {
        state = unlearn_core::seed::splitmix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let a: Vec<f64> = (0..d * d).map(|_| next()).collect();
    SymMatrix::from_fn(d, |i, j| (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum()).unwrap()
}

fn eigen(c: &mut Criterion) {
    let mut g = c.benchmark_group("eigen");
    for d in [16, 64, 256] {
        let m = random_psd(d, d as u64);
        g.bench_with_input(BenchmarkId::new("sym_eig", d), &m, |b, m| {
            b.iter(|| sym_eig(black_box(m)))
        });
        g.bench_with_input(BenchmarkId::new("psd_sqrt", d), &m, |b, m| {
            b.iter(|| psd_sqrt(black_box(m), 1e-10))
        });
    }
    let big = random_psd(400, 7);
    g.bench_function("lambda_max/400", |b| b.iter(|| lambda_max(black_box(&big))));
    g.finish();
}

fn coherence(c: &mut Criterion) {
    let mut g = c.benchmark_group("mix_coherence");
    let mut rng = rng_from_seed(3);
    let ens = random_rank_one_ensemble(&mut rng, 40, 10, 10, (0.1, 1.0)).unwrap();
    let cfg = UnlearnConfig::new(0.1, 0.3, 5, 10, 10).unwrap();
    for (name, path) in [("factored", CoherencePath::Factored), ("dense", CoherencePath::Dense)] {
        let opts = CoherenceOptions {
            path,
            ..Default::default()
        };
        g.bench_function(name, |b| b.iter(|| mix_coherence_with(black_box(&ens), &cfg, &opts)));
    }
    g.finish();
}

fn dynamics(c: &mut Criterion) {
    let ens = build_q_construction(&QConstructionSpec::new(50, 5)).unwrap();
    let cfg = UnlearnConfig::new(0.5, 0.1, 10, 50, 50).unwrap();
    let opts = TrajectoryOptions::default();
    c.bench_function("trajectory/q50_1000_steps", |b| {
        b.iter(|| run_trajectory(black_box(&ens), &cfg, &opts, 1))
    });
    let mut rng = rng_from_seed(5);
    let small = random_rank_one_ensemble(&mut rng, 5, 6, 6, (0.1, 1.0)).unwrap();
    let cfg = UnlearnConfig::new(0.3, 0.2, 2, 6, 6).unwrap();
    c.bench_function("noise_recurrence/d5_k50", |b| {
        b.iter(|| noise_recurrence(black_box(&small), &cfg, 50))
    });
}

criterion_group!(benches, eigen, coherence, dynamics);
criterion_main!(benches);
