use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use rwre_bench::{fitted, planar};
use rwre_core::cgf::TiltPoint;
use rwre_core::ratefn::{rate_i, rate_j, region_constants};
use rwre_core::SampleSet;

fn harvest(c: &mut Criterion) {
    let (model, dir) = planar();
    let mut group = c.benchmark_group("harvest");
    group.sample_size(10);
    for count in [1_000usize, 10_000] {
        group.bench_with_input(BenchmarkId::from_parameter(count), &count, |b, &count| {
            b.iter(|| SampleSet::harvest(&model, &dir, count, None, 7, None).unwrap())
        });
    }
    group.finish();
}

fn cumulant(c: &mut Criterion) {
    let (_, cgf) = fitted(100_000, 7);
    let tilt = TiltPoint::new(vec![0.1, -0.05], -0.02);
    c.bench_function("cgf_eval", |b| b.iter(|| cgf.eval(black_box(&tilt)).unwrap()));
}

fn rates(c: &mut Criterion) {
    let (set, cgf) = fitted(100_000, 7);
    let (_, dir) = planar();
    let consts = region_constants(&set).unwrap();
    c.bench_function("rate_i", |b| b.iter(|| rate_i(&cgf, black_box(&[0.5, 0.05]), 1.2).unwrap()));
    c.bench_function("rate_j", |b| b.iter(|| rate_j(&cgf, &dir, black_box(&[0.3, 0.02]), &consts).unwrap()));
}

criterion_group!(benches, harvest, cumulant, rates);
criterion_main!(benches);
