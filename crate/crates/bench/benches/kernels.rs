use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use ren_core::distributions::sample_std_gamma;
use ren_core::metrics::energy_distance;
use ren_core::rng::SeedTree;
use ren_core::special::{gamma_p, gamma_p_da};
use ren_core::{Tape, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).rng();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [32, 128, 512] {
        let a = random(n, n, 1);
        let b = random(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let x = tape.leaf(a.clone());
                let y = tape.leaf(b.clone());
                let out = x.matmul(y).unwrap().sum();
                tape.backward(out).unwrap()
            })
        });
    }
    group.finish();
}

fn special(c: &mut Criterion) {
    let mut group = c.benchmark_group("special");
    for a in [0.01, 1.0, 100.0] {
        group.bench_with_input(BenchmarkId::new("gamma_p", a), &a, |b, &a| b.iter(|| gamma_p(a, a * 1.1).unwrap()));
        group.bench_with_input(BenchmarkId::new("gamma_p_da", a), &a, |b, &a| {
            b.iter(|| gamma_p_da(a, a * 1.1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sample", a), &a, |b, &a| {
            let mut rng = SeedTree::new(3).rng();
            b.iter(|| sample_std_gamma(a, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn energy(c: &mut Criterion) {
    let a = random(1024, 2, 4);
    let b = random(1024, 2, 5);
    c.bench_function("energy_distance_1024x2", |bench| bench.iter(|| energy_distance(&a, &b, false).unwrap()));
}

criterion_group!(benches, matmul, special, energy);
criterion_main!(benches);
