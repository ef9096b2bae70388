//! Benchmarks for the hot paths: interval propagation, backward linear
//! bounding, the PGD attack, branch-and-bound verification, and one
//! training epoch.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use certiprune::bounds::{crown_lower, input_box, propagate_ibp, PhaseConstraints};
use certiprune::verify::{logit_margin_rows, pgd_attack, AttackConfig};
use certiprune::{
    gen_two_moons, train, verify_sample, ArchSpec, BabConfig, Network, PruneScope, Tensor,
    TrainConfig, TrainMethod,
};

const RANGE: (f32, f32) = (0.0, 1.0);

fn mlp(width: usize, depth: usize) -> Network {
    let hidden = vec![width; depth];
    Network::build(ArchSpec::mlp(2, &hidden, 2, false), 7, PruneScope::ConvAndAffine).unwrap()
}

fn sample() -> Tensor {
    Tensor::new(vec![2], vec![0.4, 0.6]).unwrap()
}

fn bench_ibp(c: &mut Criterion) {
    let net = mlp(64, 3);
    let x = sample();
    let box_ = input_box(&x, 0.05, RANGE);
    let phases = PhaseConstraints::new();
    c.bench_function("ibp_propagate_mlp64x3", |b| {
        b.iter(|| propagate_ibp(black_box(&net), black_box(&box_), &phases).unwrap())
    });
}

fn bench_crown(c: &mut Criterion) {
    let net = mlp(64, 3);
    let x = sample();
    let box_ = input_box(&x, 0.05, RANGE);
    let lb = propagate_ibp(&net, &box_, &PhaseConstraints::new()).unwrap();
    let rows = logit_margin_rows(2, 0);
    let consts = Tensor::zeros(vec![rows.shape()[0]]);
    c.bench_function("crown_margin_mlp64x3", |b| {
        b.iter(|| crown_lower(black_box(&net), black_box(&lb), &rows, &consts))
    });
}

fn bench_pgd(c: &mut Criterion) {
    let net = mlp(64, 3);
    let x = sample();
    c.bench_function("pgd_attack_mlp64x3", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            pgd_attack(
                black_box(&net),
                black_box(&x),
                0,
                0.05,
                RANGE,
                AttackConfig::default(),
                &mut rng,
            )
            .unwrap()
        })
    });
}

fn bench_verify(c: &mut Criterion) {
    let net = mlp(16, 2);
    let x = sample();
    let label = net
        .forward(&Tensor::new(vec![1, 2], x.data().to_vec()).unwrap())
        .unwrap()
        .argmax_rows()[0];
    let cfg = BabConfig {
        max_subdomains: 2_000,
        ..BabConfig::default()
    };
    c.bench_function("bab_verify_mlp16x2", |b| {
        b.iter(|| verify_sample(black_box(&net), black_box(&x), label, 0.08, RANGE, &cfg, 5))
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let ds = gen_two_moons(256, 0.08, 3).unwrap();
    let cfg = TrainConfig {
        method: TrainMethod::IbpCertified,
        epochs: 1,
        batch_size: 64,
        ramp_start: 1,
        ramp_end: 1,
        ..TrainConfig::default()
    };
    c.bench_function("train_epoch_ibp_mlp32x2", |b| {
        b.iter(|| {
            let mut net = Network::build(
                ArchSpec::mlp(2, &[32, 32], 2, false),
                9,
                PruneScope::ConvAndAffine,
            )
            .unwrap();
            train(&mut net, &ds.train_x, &ds.train_y, black_box(&cfg)).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_ibp, bench_crown, bench_pgd, bench_verify, bench_train_epoch
}
criterion_main!(benches);
