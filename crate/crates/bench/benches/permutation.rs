use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use paiconv_bench::{kpconv_weights, random_cloud};
use paiconv_core::lattice::fibonacci_lattice;
use paiconv_core::neighbors::mean_neighbor_distance;
use paiconv_core::netcls::knn_auto;
use paiconv_core::paiconv::{build_permutation, local_positions, Normalizer};
use paiconv_core::Rng;

fn permutation(c: &mut Criterion) {
    let mut group = c.benchmark_group("permutation");
    group.sample_size(20);
    for &(n, k, l) in &[(1024, 16, 16), (4096, 16, 16), (4096, 32, 32)] {
        let cloud = random_cloud(n, &mut Rng::new(0)).unwrap();
        let nbr = knn_auto(&cloud, k).unwrap();
        let local = local_positions(&cloud, &nbr).unwrap();
        let kernel = fibonacci_lattice(l).unwrap();
        let sigma = mean_neighbor_distance(&cloud, &nbr);
        let id = format!("n{n}_k{k}_l{l}");
        group.bench_with_input(BenchmarkId::new("dot_product", &id), &(), |b, _| {
            b.iter(|| build_permutation(&local, k, &kernel, Normalizer::Sparsemax).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("kpconv_linear", &id), &(), |b, _| {
            b.iter(|| kpconv_weights(&local, k, &kernel, sigma))
        });
    }
    group.finish();
}

criterion_group!(benches, permutation);
criterion_main!(benches);
