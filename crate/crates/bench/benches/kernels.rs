use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use toll_bench::{plane_cloud, propagation_fixture, score_matrix};
use toll_core::autodiff::Graph;
use toll_core::diffusion::{nafl_weights, NaflConfig};
use toll_core::sma::sinkhorn;

fn propagate(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate");
    for steps in [1, 3] {
        let (net, store, input, anchors) = propagation_fixture(steps, 2, 64);
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, _| {
            b.iter(|| {
                let mut g = Graph::no_grad();
                black_box(net.encode(&mut g, &store, &input, &anchors).unwrap().nodes)
            })
        });
    }
    group.finish();
}

fn sinkhorn_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    for (rows, cols) in [(264, 64), (3872, 1000)] {
        let scores = score_matrix(rows, cols, 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &scores, |b, s| {
            b.iter(|| black_box(sinkhorn(s, 0.05, 10).unwrap()))
        });
    }
    group.finish();
}

fn nafl(c: &mut Criterion) {
    let cfg = NaflConfig::default();
    let mut group = c.benchmark_group("nafl");
    for n in [256, 1024] {
        let cloud = plane_cloud(n, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cloud, |b, pts| {
            b.iter(|| black_box(nafl_weights(pts, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, propagate, sinkhorn_bench, nafl);
criterion_main!(benches);
