//! Thread pool of one against a pool sized to the machine. Build with
//! `--no-default-features` to time the plain sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tvexp_core::data::truncate_at_event;
use tvexp_core::estimators::{estimate_mi, JmOptions, JmProblem, Method};
use tvexp_core::lmm::{fit_lmm, LmmSpec};
use tvexp_core::numerics::RngStream;
use tvexp_core::par;
use tvexp_core::simulate::{generate, preset};
use tvexp_core::study::{run_study, StudyConfig};

fn pools() -> Vec<usize> {
    let n = std::thread::available_parallelism().map_or(1, usize::from);
    if n > 1 {
        vec![1, n]
    } else {
        vec![1]
    }
}

fn jm_gradient(c: &mut Criterion) {
    let cfg = preset("5").unwrap();
    let (cohort, _) = generate(&cfg, &RngStream::new(1, 0)).unwrap();
    let cohort = truncate_at_event(&cohort);
    let spec = LmmSpec::linear();
    let mut problem = JmProblem::new(&cohort, &spec, &JmOptions::default()).unwrap();
    let lmm = fit_lmm(&cohort, &spec).unwrap();
    let mut theta = lmm.theta.clone();
    theta.extend([0.2, 0.4, 2.7]);
    assert_eq!(theta.len(), problem.n_params());
    problem.recentre(&theta).unwrap();

    let mut g = c.benchmark_group("jm_loglik_gradient_n500");
    for jobs in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || black_box(problem.loglik_and_gradient(&theta).unwrap())))
        });
    }
    g.finish();
}

fn mi_fit(c: &mut Criterion) {
    let cfg = preset("11").unwrap();
    let (cohort, _) = generate(&cfg, &RngStream::new(2, 0)).unwrap();
    let spec = LmmSpec::linear();
    let stream = RngStream::new(3, 0);
    let mut g = c.benchmark_group("mi_m10_n500");
    g.sample_size(10);
    for jobs in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || black_box(estimate_mi(&cohort, &spec, 10, 0, &stream).unwrap())))
        });
    }
    g.finish();
}

fn small_study(c: &mut Criterion) {
    let mut sc = preset("2").unwrap();
    sc.n_subjects = 200;
    let mut cfg = StudyConfig::new(sc, vec![Method::Locf, Method::Rc], 8, 5);
    cfg.n_boot = 10;
    let mut g = c.benchmark_group("study_8_replicates");
    g.sample_size(10);
    for jobs in pools() {
        cfg.parallelism = jobs;
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &cfg, |b, cfg| {
            b.iter(|| black_box(run_study(cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, jm_gradient, mi_fit, small_study);
criterion_main!(benches);
