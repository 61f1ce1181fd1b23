use std::f64::consts::FRAC_PI_3;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use capflow::curvature::curvature_bundle;
use capflow::flow::{FlowConfig, FlowProblem, InitialSpec, PhiSpec, Stepper};
use capflow::par::{self, ExecMode};

fn problem(n_rho: usize) -> (FlowConfig, FlowProblem) {
    let mut cfg = FlowConfig::new(
        FRAC_PI_3,
        2,
        n_rho,
        2 * n_rho,
        PhiSpec::Power { p: 4.0 },
        "1 + 0.3*x3",
    );
    cfg.h0 = InitialSpec {
        scale: 1.0,
        amplitude: 0.1,
        mode: Some("random".into()),
    };
    let p = FlowProblem::from_config(&cfg).unwrap();
    (cfg, p)
}

fn modes() -> [(&'static str, ExecMode); 2] {
    [
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ]
}

fn bench_evaluate(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    for n_rho in [32, 64, 128] {
        let (cfg, p) = problem(n_rho);
        let h = p.initial_h(&cfg.h0, 1).unwrap();
        for (name, mode) in modes() {
            par::set_mode(mode);
            group.bench_with_input(BenchmarkId::new(name, n_rho), &h, |b, h| {
                b.iter(|| black_box(p.evaluate(h).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_bundle(c: &mut Criterion) {
    let mut group = c.benchmark_group("curvature_bundle");
    let (cfg, p) = problem(128);
    let h = p.initial_h(&cfg.h0, 1).unwrap();
    for (name, mode) in modes() {
        par::set_mode(mode);
        group.bench_function(name, |b| {
            b.iter(|| black_box(curvature_bundle(&p.grid, &h).unwrap()))
        });
    }
    group.finish();
}

fn bench_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    group.sample_size(10);
    let (cfg, p) = problem(64);
    let h = p.initial_h(&cfg.h0, 1).unwrap();
    for (name, mode) in modes() {
        par::set_mode(mode);
        let mut stepper = Stepper::new(&p, &cfg).unwrap();
        let state = stepper.initial_state(h.clone()).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| black_box(stepper.step(&state, f64::INFINITY).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_bundle, bench_step);
criterion_main!(benches);
