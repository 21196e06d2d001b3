//! Sequential vs rayon execution of the data-parallel kernels.
//!
//! Both modes produce bitwise-identical results; these benches only compare
//! wall time. Build with `--no-default-features` to see the fallback cost
//! of the `Parallel` arm (it then runs sequentially).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mor::adapters::{Adapter, MorLayer, RouterKind};
use mor::cli::verify::run_suites;
use mor::grads::{finite_diff_with, mor_backward_with, Stencil, FD_STEP};
use mor::matcore::Rng;
use mor::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn layer(d_in: usize, d_out: usize, r: usize, n: usize) -> MorLayer {
    let mut rng = Rng::new(11);
    let mut l = MorLayer::init(
        rng.gaussian_matrix(d_out, d_in, 0.0, 1.0).unwrap(),
        r,
        n,
        16.0,
        RouterKind::Learnable,
        &mut rng,
    )
    .unwrap();
    l.b = rng.gaussian_matrix(d_out, r, 0.0, 0.1).unwrap();
    l
}

fn stacked_forward(c: &mut Criterion) {
    let l = layer(256, 256, 16, 8);
    let x = Rng::new(3).gaussian_matrix(512, 256, 0.0, 1.0).unwrap();
    let mut g = c.benchmark_group("stacked_forward_512x256");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| l.forward_stacked_with(exec, black_box(&x), &x).unwrap()));
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let l = layer(128, 128, 8, 8);
    let x = Rng::new(4).gaussian_matrix(256, 128, 0.0, 1.0).unwrap();
    let dy = Rng::new(5).gaussian_matrix(256, 128, 0.0, 1.0).unwrap();
    let mut g = c.benchmark_group("mor_backward_256x128");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| mor_backward_with(exec, &l, black_box(&x), &x, &dy).unwrap()));
    }
    g.finish();
}

fn finite_differences(c: &mut Criterion) {
    let l = layer(16, 12, 4, 4);
    let x = Rng::new(6).gaussian_matrix(8, 16, 0.0, 1.0).unwrap();
    let p0 = l.trainable_params();
    let objective = |p: &[f64]| {
        let mut m = l.clone();
        m.set_trainable_params(p).unwrap();
        0.5 * m.forward_batch(&x).unwrap().y.frobenius_sq()
    };
    let mut g = c.benchmark_group("finite_diff_central4");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, p0.len()), &p0, |b, p| {
            b.iter(|| finite_diff_with(exec, Stencil::Central4, objective, p, FD_STEP).unwrap())
        });
    }
    g.finish();
}

fn verify_suites(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify_suites");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| run_suites(exec, black_box(0))));
    }
    g.finish();
}

criterion_group!(benches, stacked_forward, backward, finite_differences, verify_suites);
criterion_main!(benches);
