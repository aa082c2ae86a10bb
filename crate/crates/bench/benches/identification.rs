use std::hint::black_box;

use chronident_core::ident_acov::{build_regression, solve_theta_a};
use chronident_core::ident_mdm::build_mdm_system;
use chronident_core::model::maser_ensemble_params;
use chronident_core::simulate::simulate_measurements;
use chronident_core::stability::{acov_grid, log_spaced_grid};
use chronident_core::{estimate_acov_method, estimate_mdm, AcovOptions, EnsembleModel, MdmConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const TS: f64 = 5.0;
const N: usize = 200_000;

fn bench_simulation(c: &mut Criterion) {
    let model = EnsembleModel::assemble(&maser_ensemble_params(), TS).unwrap();
    c.bench_function("simulate 200k steps", |b| {
        b.iter(|| simulate_measurements(&model, black_box(N), 1, None).unwrap())
    });
}

fn bench_acov(c: &mut Criterion) {
    let model = EnsembleModel::assemble(&maser_ensemble_params(), TS).unwrap();
    let record = simulate_measurements(&model, N, 1, None).unwrap();
    let grid = log_spaced_grid(20, N / 2, TS).unwrap();

    c.bench_function("acov grid", |b| {
        b.iter(|| acov_grid(black_box(&record), &grid).unwrap())
    });

    let acov = acov_grid(&record, &grid).unwrap();
    c.bench_function("acov wls solve", |b| {
        b.iter(|| {
            let system = build_regression(black_box(&acov), 4).unwrap();
            solve_theta_a(&system, false).unwrap()
        })
    });

    let mut group = c.benchmark_group("estimate");
    group.sample_size(10);
    group.bench_function("acov", |b| {
        b.iter(|| estimate_acov_method(black_box(&record), &AcovOptions::default()).unwrap())
    });
    let mdm = MdmConfig {
        ts_target: 50.0,
        ..MdmConfig::default()
    };
    group.bench_function("mdm", |b| {
        b.iter(|| estimate_mdm(black_box(&record), &mdm, 0.0).unwrap())
    });
    group.finish();
}

fn bench_mdm_system(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_mdm_system");
    for l in [3, 5, 8] {
        group.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, &l| {
            b.iter(|| build_mdm_system(4, 5000.0, black_box(l)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulation, bench_acov, bench_mdm_system);
criterion_main!(benches);
