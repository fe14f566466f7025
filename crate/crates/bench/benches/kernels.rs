use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mulse_bench::fixture;
use mulse_core::conformal::prediction_set;
use mulse_core::phy::{encode_reals, transmit, ChannelConfig, Modulation, PayloadKind};
use mulse_core::protocol::{run_dataset, run_sample, ChannelPlan, SimConfig, Simulation};
use mulse_core::tensor::softmax;
use mulse_core::{Approach, Combiner, ModalityReport};

fn encoder(c: &mut Criterion) {
    let f = fixture();
    let input = &f.data.test[0].inputs[1];
    let padded = f.model.pad_and_embed(input).unwrap();
    let latent = f.model.encode_a(&padded).unwrap();
    c.bench_function("encode_a", |b| {
        b.iter(|| f.model.encode_a(black_box(&padded)).unwrap())
    });
    c.bench_function("encode_b", |b| {
        b.iter(|| {
            f.model
                .encode_b(black_box(&padded), black_box(&latent))
                .unwrap()
        })
    });
    c.bench_function("classify_raw", |b| {
        b.iter(|| {
            f.model
                .classify_raw(black_box(&f.data.test[0].inputs), 0)
                .unwrap()
        })
    });
}

fn fusion(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("fuse");
    for classes in [4usize, 100] {
        let reports: Vec<ModalityReport> = (0..3)
            .map(|m| {
                let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = softmax(&logits);
                ModalityReport {
                    modality: m,
                    set: prediction_set(&p, 0.9),
                    softmax: p,
                }
            })
            .collect();
        for combiner in [Combiner::Ewc, Combiner::Sssc { beta: 2.0 }] {
            group.bench_with_input(
                BenchmarkId::new(combiner.name(), classes),
                &reports,
                |b, r| b.iter(|| combiner.fuse(black_box(r)).unwrap()),
            );
        }
    }
    group.finish();
}

fn channel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f64> = (0..1280).map(|_| rng.random_range(-4.0..4.0)).collect();
    let payload = encode_reals(&values, PayloadKind::LatentData).unwrap();
    let mut group = c.benchmark_group("transmit");
    group.throughput(Throughput::Elements(payload.len() as u64));
    for m in [Modulation::Qpsk, Modulation::Qam64] {
        let cfg = ChannelConfig::new(10.0, m, 1e6, 7).unwrap();
        group.bench_function(m.name(), |b| b.iter(|| transmit(black_box(&payload), &cfg)));
    }
    group.finish();
}

fn simulator(c: &mut Criterion) {
    let f = fixture();
    let cfg = SimConfig {
        channel: ChannelPlan::uniform(30.0).degrade_modality(0, 10.0),
        reliable_control: false,
        ..SimConfig::default()
    };
    let sim = Simulation {
        model: &f.model,
        calibration: Some(&f.calibration),
        config: &cfg,
    };
    let mut group = c.benchmark_group("run_sample");
    for a in Approach::ALL {
        group.bench_function(a.to_string(), |b| {
            b.iter(|| run_sample(a, black_box(&f.data.test[0]), &sim).unwrap())
        });
    }
    group.finish();
    c.bench_function("run_dataset/A5/32", |b| {
        b.iter(|| run_dataset(Approach::A5, black_box(&f.data.test), &sim).unwrap())
    });
}

criterion_group!(benches, encoder, fusion, channel, simulator);
criterion_main!(benches);
