//! Sequential vs rayon execution of a training epoch and a simulated step.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gradsparse::nn::data::{gaussian_blobs, BlobParams};
use gradsparse::nn::{LayerSpec, Network, NetworkSpec, Trainer};
use gradsparse::prune::PruneConfig;
use gradsparse::sim::{run, ArchConfig, Mode};
use gradsparse::trace::StepTrace;
use gradsparse::Exec;

fn spec() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::conv(1, 8, 3, 1, 1),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::conv(8, 16, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::Fc {
                inputs: 256,
                outputs: 3,
            },
        ],
        input: [1, 16, 16],
        classes: 3,
        learning_rate: 0.05,
        batch_size: 16,
    }
}

fn modes() -> [(&'static str, Exec); 2] {
    [
        ("sequential", Exec::Sequential),
        ("parallel", Exec::Parallel),
    ]
}

fn bench_epoch(c: &mut Criterion) {
    let data = gaussian_blobs(
        &BlobParams {
            samples: 64,
            height: 16,
            width: 16,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let net = Network::init(spec(), 1).unwrap();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut t = Trainer::new(
                    net.clone(),
                    Some(PruneConfig::new(0.9, 2).unwrap()),
                    1,
                    exec,
                )
                .unwrap();
                black_box(t.train_epoch(&data, 0).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_sim(c: &mut Criterion) {
    let data = gaussian_blobs(
        &BlobParams {
            samples: 16,
            height: 16,
            width: 16,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let net = Network::init(spec(), 2).unwrap();
    let t = Trainer::new(net, None, 2, Exec::Parallel).unwrap();
    let step = t.probe_batch(&data.images, &data.labels).unwrap();
    let traces: Vec<StepTrace> = (0..4)
        .map(|s| StepTrace::capture(&t.net, &step.ctx, &step.backward, None, s).unwrap())
        .collect();
    let cfg = ArchConfig::default();
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(run(&cfg, &traces, Mode::Sparse, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_epoch, bench_sim);
criterion_main!(benches);
