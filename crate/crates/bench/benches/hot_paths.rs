use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tvo_gpbandit::acquisition::{kappa, maximize_acquisition, AcquisitionConfig, MaximizeOptions};
use tvo_gpbandit::gp::FitOptions;
use tvo_gpbandit::kernel::gram_matrix;
use tvo_gpbandit::models::{BernoulliLatentModel, Fixture};
use tvo_gpbandit::regret::information_gain;
use tvo_gpbandit::schedule::linear_schedule;
use tvo_gpbandit::tvo::{tvo_lower, EnumerableModel};
use tvo_gpbandit::{Bounds, GpState, KernelHyperparams, Point};

fn history(n: usize, dim: usize) -> GpState {
    let hyp = KernelHyperparams {
        lengthscale: 0.3,
        omega: 0.05,
        noise_variance: 0.1,
        permutation_invariant: true,
    };
    let pts = (0..n)
        .map(|i| Point::new((0..dim).map(|j| ((i * 7 + j * 13) % 29) as f64 / 29.0).collect(), i + 1))
        .collect();
    let y = (0..n).map(|i| ((i as f64) * 0.7).sin()).collect();
    GpState::from_parts(pts, y, hyp).unwrap()
}

fn gp(c: &mut Criterion) {
    let mut g = c.benchmark_group("gp");
    for n in [16, 64] {
        let state = history(n, 4);
        let q = Point::new(vec![0.2, 0.4, 0.6, 0.8], n + 1);
        g.bench_with_input(BenchmarkId::new("posterior", n), &n, |b, _| {
            b.iter(|| state.posterior(black_box(&q)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("log_marginal_likelihood", n), &n, |b, _| {
            b.iter(|| history(n, 4).log_marginal_likelihood().unwrap())
        });
    }
    let state = history(32, 4);
    g.sample_size(10);
    g.bench_function("fit_map/32", |b| {
        b.iter(|| state.fit_map(black_box(&FitOptions::default())))
    });
    g.finish();
}

fn acquisition(c: &mut Criterion) {
    let state = history(32, 4);
    let cfg = AcquisitionConfig::default();
    c.bench_function("acquisition/kappa", |b| b.iter(|| kappa(black_box(50), &cfg).unwrap()));
    c.bench_function("acquisition/maximize", |b| {
        b.iter(|| {
            let k = kappa(33, &cfg).unwrap();
            maximize_acquisition(&state, 33, k, 4, Bounds::ARM_BOX, None, MaximizeOptions::from(&cfg), 1).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let data = Fixture::generate(8, 12, 64, 3).unwrap().data;
    let model = BernoulliLatentModel::random(8, 12, 0.1, 4).unwrap();
    let partition = linear_schedule(5).unwrap().partition();
    let batch = model.enumerate_latents(&data).unwrap();
    let mut g = c.benchmark_group("tvo");
    g.bench_function("lower_bound/k8_n64", |b| {
        b.iter(|| tvo_lower(black_box(&batch), &partition).unwrap())
    });
    g.bench_function("exact_gradient/k8_n64", |b| {
        b.iter(|| model.tvo_gradient_exact(black_box(&data), &partition).unwrap())
    });
    g.finish();
}

fn info_gain(c: &mut Criterion) {
    let hyp = KernelHyperparams {
        lengthscale: 0.1,
        omega: 0.01,
        noise_variance: 0.01,
        permutation_invariant: false,
    };
    let pts: Vec<Point> = (0..100)
        .map(|i| Point::new(vec![((i * 37) % 64) as f64 / 63.0], i + 1))
        .collect();
    let k = gram_matrix(&pts, &hyp).unwrap();
    c.bench_function("regret/information_gain/100", |b| {
        b.iter(|| information_gain(black_box(&k), 0.01).unwrap())
    });
}

criterion_group!(benches, gp, acquisition, training, info_gain);
criterion_main!(benches);
