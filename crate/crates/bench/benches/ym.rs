use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ymorse::benchlib::sphere_z2;
use ymorse::flow::integrate;
use ymorse::morse_bott::{cascade_homology, BitMatrix, HomologyOptions};
use ymorse::objective::Objective;
use ymorse::{Controller, EnergyBackend, Group, Lattice, OrientedCellComplex, YangMills};

fn su2_genus2() -> YangMills {
    let l = Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap();
    YangMills::new(l, EnergyBackend::Wilson)
}

fn u1_grid(n: usize, m: usize) -> YangMills {
    let l = Lattice::new(OrientedCellComplex::torus_grid(n, m).unwrap(), Group::U1).unwrap();
    YangMills::new(l, EnergyBackend::Wilson)
}

fn derivatives(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, obj) in [("su2 g=2", su2_genus2()), ("u1 4x4", u1_grid(4, 4))] {
        let a = obj.random_point(&mut rng);
        c.bench_function(&format!("energy {name}"), |b| b.iter(|| obj.energy(black_box(&a))));
        c.bench_function(&format!("gradient {name}"), |b| b.iter(|| obj.gradient_field(black_box(&a))));
        c.bench_function(&format!("hessian {name}"), |b| b.iter(|| obj.hessian_matrix(black_box(&a))));
    }
}

fn flows(c: &mut Criterion) {
    let obj = u1_grid(2, 1);
    let ctl = Controller::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("flow u1 2x1", |b| {
        b.iter_batched(|| obj.random_point(&mut rng), |a| integrate(&obj, &a, &ctl), BatchSize::SmallInput)
    });
}

fn chain_rank(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = BitMatrix::zeros(256, 256);
    for r in 0..256 {
        for col in 0..256 {
            m.set(r, col, rand::Rng::random::<bool>(&mut rng));
        }
    }
    c.bench_function("z2 rank 256", |b| b.iter(|| black_box(&m).rank()));
}

fn sphere_homology(c: &mut Criterion) {
    let obj = sphere_z2();
    let opts = HomologyOptions::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("cascade homology s2", |b| b.iter(|| cascade_homology(&obj, &opts, &mut ChaCha8Rng::seed_from_u64(4))));
    group.finish();
}

criterion_group!(benches, derivatives, flows, chain_rank, sphere_homology);
criterion_main!(benches);
