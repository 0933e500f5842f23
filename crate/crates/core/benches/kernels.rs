//! Hot kernels on a single-thread pool versus the default pool.
//!
//! Built with `--no-default-features`, only the sequential path is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ebad::dbm::{self, CrDbmParams, MeanFieldConfig};
use ebad::detector;
use ebad::pipeline::{self, PipelineConfig};
use ebad::rbm::{self, RbmParams, TrainConfig};
use ebad::synth::{self, SceneConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(label, thread count)`; zero means rayon's default.
fn pools() -> Vec<(&'static str, usize)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", 1), ("parallel", 0)]
    } else {
        vec![("sequential", 1)]
    }
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_pool<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn data(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

fn cd_step(c: &mut Criterion) {
    let batch = data(512, 216, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = RbmParams::random(216, 100, &mut rng);
    let cfg = TrainConfig { epochs: 1, learning_rate: 0.1, cd_steps: 1, batch_size: 512, seed: 0 };
    let mut group = c.benchmark_group("cd_step_512x216x100");
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                with_pool(threads, || {
                    let mut p = params.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(3);
                    rbm::cd_step(batch.view(), &mut p, &cfg, &mut rng).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn mean_field(c: &mut Criterion) {
    let batch = data(512, 216, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = CrDbmParams::random(216, 4, 200, &mut rng);
    let mf = MeanFieldConfig::default();
    let mut group = c.benchmark_group("mean_field_512x216");
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| with_pool(threads, || dbm::mean_field_batch(batch.view(), &params, mf).unwrap()))
        });
    }
    group.finish();
}

fn score_frame(c: &mut Criterion) {
    let scene = SceneConfig { height: 128, width: 128, seed: 6, ..SceneConfig::default() };
    let video = synth::render(&scene, 4, &[], None);
    let cfg = PipelineConfig { scales: vec![1.0], epochs: 2, region_hidden: 100, ..PipelineConfig::default() };
    let bundle = pipeline::train_bundle(&video.frames, &cfg).unwrap();
    let model = bundle.scale_models(cfg.mean_field()).unwrap().remove(0);
    let mut group = c.benchmark_group("score_frame_128x128");
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| with_pool(threads, || detector::score_frame(&video.frames[0], &model, cfg.beta()).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = cd_step, mean_field, score_frame
}
criterion_main!(kernels);
