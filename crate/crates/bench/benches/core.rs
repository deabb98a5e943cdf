//! Criterion benchmarks for the hot paths: the self-consistent solver, the
//! full error pipeline, the alignment battery, and the finite-size fit.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use icl_align_core::alignment::alignment_report;
use icl_align_core::covariance::CovarianceSpec;
use icl_align_core::rng::RngStream;
use icl_align_core::simulator::{fit_gamma, sample_batch, SimConfig};
use icl_align_core::theory::{solve_self_consistent, theory_errors, ModelParams};

fn params(tau: f64, kappa: f64, lambda: f64) -> ModelParams {
    ModelParams { alpha_train: 2.0, alpha_test: 2.0, tau, kappa, rho: 0.01, lambda }
}

fn bench_solver(c: &mut Criterion) {
    let train = CovarianceSpec::make_powerlaw(100, 0.9, 1.0).unwrap();
    let p = params(4.0, 1.0, 0.0);
    c.bench_function("solve_self_consistent_d100_powerlaw", |b| {
        b.iter(|| solve_self_consistent(black_box(&p), black_box(&train)).unwrap())
    });
    let p_under = params(0.5, 1.0, 0.0);
    c.bench_function("solve_self_consistent_d100_underparam", |b| {
        b.iter(|| solve_self_consistent(black_box(&p_under), black_box(&train)).unwrap())
    });
}

fn bench_theory(c: &mut Criterion) {
    let train = CovarianceSpec::make_powerlaw(100, 0.9, 1.0).unwrap();
    let mut rng = RngStream::new(1).rng();
    let test = CovarianceSpec::make_powerlaw(100, 0.3, 1.0)
        .unwrap()
        .rotated(&mut rng)
        .unwrap();
    let p = params(4.0, 1.0, 0.0);
    c.bench_function("theory_errors_d100_rotated_test", |b| {
        b.iter(|| theory_errors(black_box(&p), black_box(&train), black_box(&test)).unwrap())
    });
    c.bench_function("alignment_report_d100", |b| {
        b.iter(|| alignment_report(black_box(&p), black_box(&train), black_box(&test)).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    // d = 12 gives p = 156 features: tau = 2 exercises the primal (n >= p)
    // path, tau = 0.5 the dual (Gram) path.
    for (label, tau) in [("primal", 2.0), ("dual", 0.5)] {
        let d = 12;
        let config = SimConfig {
            d,
            params: params(tau, 1.0, 1e-4),
            train: CovarianceSpec::make_powerlaw(d, 0.9, 1.0).unwrap(),
            test: CovarianceSpec::identity(d).unwrap(),
            n_test_contexts: 1,
            replicates: 1,
            seed: 0,
        };
        let sizes = config.derived().unwrap();
        c.bench_function(&format!("fit_gamma_d12_{label}"), |b| {
            b.iter_batched(
                || sample_batch(&config, RngStream::new(7)).unwrap(),
                |batch| fit_gamma(black_box(&batch), d, sizes.n, 1e-4).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    let d = 24;
    let config = SimConfig {
        d,
        params: params(2.0, 1.0, 1e-4),
        train: CovarianceSpec::make_powerlaw(d, 0.9, 1.0).unwrap(),
        test: CovarianceSpec::identity(d).unwrap(),
        n_test_contexts: 1,
        replicates: 1,
        seed: 0,
    };
    c.bench_function("sample_batch_d24", |b| {
        b.iter(|| sample_batch(black_box(&config), RngStream::new(7)).unwrap())
    });
}

criterion_group!(benches, bench_solver, bench_theory, bench_fit);
criterion_main!(benches);
