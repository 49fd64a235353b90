use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use convstack_bench::{magnitude_prune, problems};
use convstack_core::bench::seeded_input;
use convstack_core::compress;
use convstack_core::graph::{forward, generate_toy_workload, ScheduleMap, WorkloadConfig};
use convstack_core::kernels::{conv2d, sparse_conv2d, Algorithm, Schedule};

fn dense(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense");
    for p in problems() {
        for a in Algorithm::ALL {
            let sched = Schedule::untuned(a);
            group.bench_with_input(BenchmarkId::new(a.name(), &p.name), &p, |b, p| {
                b.iter(|| conv2d(black_box(&p.input), &p.spec, &sched).unwrap())
            });
        }
    }
    group.finish();
}

fn tiled(c: &mut Criterion) {
    let mut group = c.benchmark_group("tiled");
    let p = &problems()[1];
    for a in Algorithm::ALL {
        for (tile, unroll, parallel) in [(8, 4, false), (16, 8, false), (8, 4, true)] {
            let sched = Schedule { algorithm: a, tile_oc: tile, tile_h: tile, tile_w: tile, unroll, parallel };
            let id = format!("{}/t{tile}u{unroll}{}", p.name, if parallel { "p" } else { "" });
            group.bench_function(BenchmarkId::new(a.name(), id), |b| {
                b.iter(|| conv2d(black_box(&p.input), &p.spec, &sched).unwrap())
            });
        }
    }
    group.finish();
}

fn sparse(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparse");
    for p in problems() {
        for fraction in [0.5, 0.9, 0.99] {
            let spec = magnitude_prune(&p.spec, fraction).to_sparse();
            for a in Algorithm::ALL {
                let sched = Schedule::untuned(a);
                group.bench_function(BenchmarkId::new(a.name(), format!("{}/{fraction}", p.name)), |b| {
                    b.iter(|| sparse_conv2d(black_box(&p.input), &spec, &sched).unwrap())
                });
            }
        }
    }
    group.finish();
}

fn model_dtypes(c: &mut Criterion) {
    let (model, train, _) = generate_toy_workload(&WorkloadConfig::default()).unwrap();
    let params = compress::calibrate_i8(&model, &train).unwrap();
    let variants = [
        ("f32", model.clone()),
        ("f16", compress::quantize_model_f16(&model).unwrap()),
        ("i8", compress::quantize_model_i8(&model, &params).unwrap()),
    ];
    let x = seeded_input(model.input, 0);
    let mut group = c.benchmark_group("toy_forward");
    for (name, m) in &variants {
        for a in Algorithm::ALL {
            let sched = ScheduleMap::Shared(Schedule::untuned(a));
            group.bench_function(BenchmarkId::new(a.name(), name), |b| {
                b.iter(|| forward(m, black_box(&x), &sched).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, dense, tiled, sparse, model_dtypes);
criterion_main!(benches);
