use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use factorformer::dgp::{simulate, DgpSpec};
use factorformer::net::{forward, grad, Example, Hyperparams, Mode, TransformerParams};
use factorformer::particle::{apf_on_dataset, ApfOptions};
use factorformer::ssm::{initial_guess, kalman_filter};
use factorformer::train::make_windows;

fn network(c: &mut Criterion) {
    let spec = DgpSpec::preset(1).unwrap();
    let ds = simulate(&spec, 1).unwrap();
    let h = Hyperparams::new(ds.k());
    let params = TransformerParams::init(&h, 0).unwrap();
    let prior = vec![0.0; ds.n()];
    let windows: Vec<Example> = make_windows(&ds.y, &prior, h.p, &[0..41]).unwrap();
    let batch: Vec<&Example> = windows.iter().take(32).collect();
    c.bench_function("forward/window", |b| b.iter(|| forward(black_box(&windows[0].window), &params, &h, Mode::Infer).unwrap()));
    c.bench_function("grad/batch32", |b| b.iter(|| grad(black_box(&params), &h, &batch, 0.6, None).unwrap()));
}

fn filters(c: &mut Criterion) {
    let mut spec = DgpSpec::preset(1).unwrap();
    spec.n = 1800;
    let ds = simulate(&spec, 2).unwrap();
    let p = initial_guess(&ds.y);
    c.bench_function("kalman/n1800_k5", |b| b.iter(|| kalman_filter(black_box(&p), &ds.y).unwrap()));
    spec.n = 200;
    let small = simulate(&spec, 3).unwrap();
    let opts = ApfOptions { n_particles: 2000, seed: 1, ..ApfOptions::default() };
    let mut g = c.benchmark_group("apf");
    g.sample_size(10);
    g.bench_function("n200_np2000", |b| b.iter(|| apf_on_dataset(black_box(&small), &opts).unwrap()));
    g.finish();
}

criterion_group!(benches, network, filters);
criterion_main!(benches);
