use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hiercoll::simnet::{simulate_time, PhysTopology, SimConfig};
use hiercoll::{Algorithm, CollectiveKind, InterAlgorithm, Topology};

fn simulator(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_ag_64M");
    for n in [16, 64, 256] {
        let cfg = SimConfig::new(Topology::new(n, 8, 4).unwrap()).with_phys(PhysTopology::RingOfNodes);
        for alg in [Algorithm::RING, Algorithm::Hierarchical(InterAlgorithm::Recursive)] {
            group.bench_with_input(BenchmarkId::new(alg.to_string(), n * 8), &cfg, |b, cfg| {
                b.iter(|| black_box(simulate_time(cfg, CollectiveKind::AllGather, alg, 64 << 20).unwrap().0))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, simulator);
criterion_main!(benches);
