use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tbnet::config::{AblationFlags, TrainConfig};
use tbnet::data::{compute_class_weights, generate_dataset, GeneratorSpec, Sample};
use tbnet::network::images_to_tensor;
use tbnet::training::{prepare_samples, TrainState};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench_desk(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let data = generate_dataset(&GeneratorSpec {
        num_samples: 2,
        image_size: cfg.input_size,
        seed: 3,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let state = TrainState::new(cfg.clone(), AblationFlags::full(), compute_class_weights(&data).unwrap()).unwrap();
    let samples = prepare_samples(&data.samples, cfg.input_size).unwrap();
    let batch: Vec<&Sample> = samples.iter().collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images, cfg.input_size).unwrap();

    let mut group = c.benchmark_group("desk_128_batch2");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("inference", name), |b| {
            pool.install(|| b.iter(|| state.network.infer(&state.params, black_box(&x)).unwrap()))
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            pool.install(|| b.iter(|| state.compute_gradients(black_box(&batch)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_desk);
criterion_main!(benches);
