//! Sequential fallback against the rayon path for the heavy kernels.
//!
//! `cargo bench -p fanet-core`; set `FANET_BENCH_THREADS` to size the pool
//! (default: available parallelism).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fanet::data::{generate_scene, SceneSpec};
use fanet::par;
use fanet::tensor::{bilinear_resize, conv2d_forward};
use fanet::{ConvSpec, FANetConfig, Graph, Segmenter, Tensor};

/// Sizes the global pool once; returns the worker count.
fn init_pool() -> usize {
    let threads = std::env::var("FANET_BENCH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    rayon::current_num_threads()
}

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

/// Runs `f` once per mode so the two show up side by side.
fn compare<R>(c: &mut Criterion, group: &str, threads: usize, f: impl Fn() -> R) {
    let mut g = c.benchmark_group(group);
    g.bench_function(BenchmarkId::new("sequential", 1), |b| {
        b.iter(|| par::sequential(|| black_box(f())))
    });
    g.bench_function(BenchmarkId::new("rayon", threads), |b| {
        b.iter(|| black_box(f()))
    });
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let threads = init_pool();

    let x = ramp(&[2, 64, 32, 32]);
    let dense = ConvSpec::new(64, 64, 3, 1, 1, 1).unwrap();
    let w = ramp(&dense.weight_shape());
    compare(c, "conv2d_3x3_dense", threads, || {
        conv2d_forward(&x, &w, None, &dense).unwrap()
    });

    let dw = ConvSpec::depthwise(64, 7).unwrap();
    let wd = ramp(&dw.weight_shape());
    compare(c, "conv2d_7x7_depthwise", threads, || {
        conv2d_forward(&x, &wd, None, &dw).unwrap()
    });

    let small = ramp(&[2, 128, 8, 8]);
    compare(c, "bilinear_resize_x4", threads, || {
        bilinear_resize(&small, 32, 32).unwrap()
    });

    let model = Segmenter::<f32>::new(FANetConfig::default(), 0).unwrap();
    let img = ramp(&[2, 3, 64, 64]).map(|v| v + 0.5);
    let target = vec![1u8; 2 * 64 * 64];
    compare(c, "train_step_forward_backward", threads, || {
        let g = Graph::new();
        let loss = model.loss(&g, g.constant(img.clone()), &target).unwrap();
        g.backward(loss).unwrap().param(0).map(|t| t.numel())
    });

    let spec = SceneSpec::default();
    compare(c, "scene_batch_16", threads, || {
        par::map_range(16, |i| generate_scene(&spec, i as u64).mask.len())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
