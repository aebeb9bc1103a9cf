use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rpnn_bench::random;
use rpnn_core::network::NetParams;
use rpnn_core::Shape;

fn layers(c: &mut Criterion) {
    let params = NetParams::init(1);
    let mut group = c.benchmark_group("conv");
    group.sample_size(10);
    for n in [48usize, 96] {
        for (i, layer) in params.layers.iter().enumerate() {
            let x = random(Shape::new(layer.in_channels(), n, n), i as u64);
            let y = layer.forward(&x).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("forward/layer{}", i + 1), n), &x, |b, x| {
                b.iter(|| layer.forward(x).unwrap())
            });
            group.bench_with_input(BenchmarkId::new(format!("backward/layer{}", i + 1), n), &x, |b, x| {
                b.iter(|| layer.backward(x, &y, i > 0).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, layers);
criterion_main!(benches);
