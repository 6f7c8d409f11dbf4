use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tbnet_tensor::{conv, resize, Graph, Tensor};

fn pseudo(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618).sin())
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        (
            "sequential",
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
        ),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench_conv(c: &mut Criterion) {
    let x = pseudo(&[4, 32, 64, 64]);
    let w = pseudo(&[64, 32, 3, 3]);
    let mut group = c.benchmark_group("conv3x3_4x32x64x64");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            pool.install(|| b.iter(|| conv::conv2d(black_box(&x), &w, None, 1, 1).unwrap()))
        });
        let gy = pseudo(&[4, 64, 64, 64]);
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            pool.install(|| b.iter(|| conv::conv2d_backward(black_box(&x), &w, &gy, 1, 1, true).unwrap()))
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let q = pseudo(&[2, 8, 1024]);
    let v = pseudo(&[2, 64, 1024]);
    let mut group = c.benchmark_group("attention_L1024");
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            pool.install(|| {
                b.iter(|| {
                    let g = Graph::inference();
                    let (q, v) = (g.constant(q.clone()), g.constant(v.clone()));
                    let s = g.batch_matmul(&q, &q, true, false).unwrap();
                    let a = g.sigmoid(&s);
                    g.batch_matmul(&v, &a, false, true).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_resize(c: &mut Criterion) {
    let x = pseudo(&[2, 9, 16, 16]);
    let mut group = c.benchmark_group("resize_16_to_128");
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            pool.install(|| b.iter(|| resize::resize_bilinear(black_box(&x), 128, 128).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(kernels, bench_conv, bench_attention, bench_resize);
criterion_main!(kernels);
