use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use franson::coincidence::delay_histogram_with;
use franson::event_sim::{DetectorModel, EventSimulator, TimeTagStream};
use franson::interferometer::NmziConfig;
use franson::spdc_source::{sample_pairs_with, SpectralModel};
use franson::Parallelism;

const N: usize = 200_000;

fn backends() -> Vec<(&'static str, Parallelism)> {
    vec![
        ("sequential", Parallelism::Sequential),
        #[cfg(feature = "parallel")]
        ("rayon", Parallelism::Rayon),
    ]
}

fn bench(c: &mut Criterion) {
    let model = SpectralModel::new(370.0, 1.0, 1.0).unwrap();
    let alice = NmziConfig::alice(30.0, 0.0).unwrap();
    let bob = NmziConfig::bob(30.0, 0.0).unwrap();
    let pairs = sample_pairs_with(&model, N, 1e6, 7, Parallelism::Sequential).unwrap();
    let streams = EventSimulator::new(alice, bob, model, DetectorModel::default())
        .simulate(&pairs, 7)
        .unwrap();
    let a = TimeTagStream::merged(0, &[&streams[0], &streams[1]]);
    let b = TimeTagStream::merged(0, &[&streams[2], &streams[3]]);

    let mut g = c.benchmark_group("pipeline");
    g.throughput(Throughput::Elements(N as u64));
    g.sample_size(10);
    for (name, par) in backends() {
        g.bench_with_input(BenchmarkId::new("sample_pairs", name), &par, |bch, &par| {
            bch.iter(|| sample_pairs_with(&model, N, 1e6, black_box(7), par).unwrap())
        });
        let sim = EventSimulator::new(alice, bob, model, DetectorModel::default()).with_parallelism(par);
        g.bench_with_input(BenchmarkId::new("simulate", name), &par, |bch, _| {
            bch.iter(|| sim.simulate(black_box(&pairs), 7).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("delay_histogram", name), &par, |bch, &par| {
            bch.iter(|| delay_histogram_with(black_box(&a), &b, 2, 200, par).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
