//! Sequential against data-parallel execution of the hot kernels.
//!
//! With the `parallel` feature each benchmark runs twice: inside a one-thread
//! rayon pool and on the global pool. Without it only the sequential path
//! exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rmgl_core::eval::{evaluate, EmbeddingRecord, Protocol};
use rmgl_core::model::{build_model, RmglConfig};
use rmgl_core::rng::stream;
use rmgl_core::tensor::{conv2d, Conv2d, Mode, Shape, Tensor};

fn modes() -> Vec<(&'static str, Box<dyn Fn(&mut (dyn FnMut() + Send))>)> {
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![
            ("sequential", Box::new(move |f: &mut (dyn FnMut() + Send)| single.install(f))),
            ("parallel", Box::new(|f: &mut (dyn FnMut() + Send)| f())),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = stream(0, 0);
    let mut layer = Conv2d::new(16, 32, (3, 3), (1, 1), (1, 1), false).unwrap();
    layer.init_kaiming(&mut rng);
    let x = Tensor::uniform(Shape::new(16, 16, 24, 8), -1.0, 1.0, &mut rng);
    let mut g = c.benchmark_group("conv2d");
    for (name, run) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&mut || drop(std::hint::black_box(conv2d(&x, &layer).unwrap()))))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = stream(1, 0);
    let model = build_model(&RmglConfig::default(), &mut rng).unwrap();
    let x = Tensor::uniform(Shape::new(32, 3, 48, 16), 0.0, 1.0, &mut rng);
    let mut g = c.benchmark_group("model_forward");
    g.sample_size(20);
    for (name, run) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&mut || drop(std::hint::black_box(model.forward(&x, Mode::Train).unwrap()))))
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    use rand::Rng;
    let mut rng = stream(2, 0);
    let mut rec = |i: usize| EmbeddingRecord {
        id: i % 50,
        camera: i % 4,
        source: i.to_string(),
        vector: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let gallery: Vec<_> = (0..500).map(&mut rec).collect();
    let query: Vec<_> = (0..100).map(&mut rec).collect();
    let mut g = c.benchmark_group("evaluate");
    for (name, run) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&mut || drop(std::hint::black_box(evaluate(&query, &gallery, Protocol::CrossCamera).unwrap()))))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, forward, retrieval);
criterion_main!(benches);
