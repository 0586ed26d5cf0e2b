use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vpr_sue::pipeline::{score_dataset, Dataset, MethodSpec};
use vpr_sue::synthgen::{generate_world, WorldConfig};
use vpr_sue::uncertainty::pose_density_with;
use vpr_sue::{build_index, Execution, SueConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn world(refs: usize, queries: usize, dim: usize) -> Dataset {
    let mut cfg = WorldConfig::simple(1, 40, refs, queries);
    cfg.descriptor_dim = dim;
    cfg.aliasing_groups = (0..10).map(|g| (g * 4..g * 4 + 4).collect()).collect();
    Dataset::from_world(&generate_world(&cfg).expect("valid world"))
}

fn retrieval(c: &mut Criterion) {
    let data = world(50, 500, 256);
    let index = build_index(&data.map);
    let mut group = c.benchmark_group("batch_retrieve");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, "N=2000,D=256,Q=500"), &exec, |b, &exec| {
            b.iter(|| index.batch_retrieve_with(black_box(&data.queries), 10, exec).unwrap())
        });
    }
    group.finish();
}

fn density(c: &mut Criterion) {
    let data = world(250, 10, 8);
    let mut group = c.benchmark_group("pose_density");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, "N=10000,k=1"), &exec, |b, &exec| {
            b.iter(|| pose_density_with(black_box(data.map.poses()), 1, exec).unwrap())
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let data = world(25, 2000, 64);
    let methods = [
        MethodSpec::L2 { name: None },
        MethodSpec::Pa { name: None },
        MethodSpec::sue(SueConfig::default()),
        MethodSpec::SueDc {
            name: None,
            config: SueConfig::default(),
            density_k: 1,
        },
    ];
    let mut group = c.benchmark_group("score_dataset");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, "N=1000,Q=2000"), &exec, |b, &exec| {
            b.iter(|| score_dataset(black_box(&data), &methods, 25.0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, retrieval, density, scoring);
criterion_main!(benches);
