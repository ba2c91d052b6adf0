//! Compares the rayon pool against a single worker on the hot paths. Build
//! with `--no-default-features` to bench the sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use histobench::latte::{adapt_batch, encode_images, AdaptationConfig, ModelConfig, TemplateSet, VisionLanguageModel};
use histobench::optics::{convolve2d, disk_kernel};
use histobench::synthetic::{class_names, texture_dataset, TextureParams};
use histobench::{par, CorruptionKind, CorruptionSpec, ImageTensor, Rng64};
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        ("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()),
        (
            "single",
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
        ),
    ]
}

fn textures(count: usize, size: usize) -> Vec<ImageTensor> {
    let params = TextureParams {
        size,
        ..TextureParams::default()
    };
    texture_dataset(count, &params, 1, "b")
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

fn convolution(c: &mut Criterion) {
    let mut rng = Rng64::new(3);
    let image = ImageTensor::from_fn(256, 256, |_, _, _| rng.next_f64() as f32);
    let kernel = disk_kernel(10, 0.5).unwrap();
    let mut group = c.benchmark_group("defocus_256");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| convolve2d(black_box(&image), &kernel).unwrap()))
        });
    }
    group.finish();
}

fn corruption_batch(c: &mut Criterion) {
    let images = textures(32, 64);
    let ids: Vec<String> = (0..images.len()).map(|i| format!("img{i}")).collect();
    let spec = CorruptionSpec::new(CorruptionKind::StainHeavy, 42);
    let mut group = c.benchmark_group("stain_heavy_batch_32");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| par::map_range(images.len(), |i| spec.apply(&images[i], &ids[i]).unwrap())))
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let images = textures(64, 64);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let model = VisionLanguageModel::new(&ModelConfig::default(), AdaptationConfig::default().lora()).unwrap();
    let mut group = c.benchmark_group("vision_forward_64");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| encode_images(&model, black_box(&refs)).unwrap()))
        });
    }
    group.finish();
}

fn latte_iteration(c: &mut Criterion) {
    let images = textures(32, 64);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let names = class_names();
    let templates = TemplateSet::default_set().take(4).unwrap();
    let cfg = AdaptationConfig {
        iterations: 1,
        ..AdaptationConfig::default()
    };
    let mut model = VisionLanguageModel::new(&ModelConfig::default(), cfg.lora()).unwrap();
    let mut group = c.benchmark_group("latte_step_32");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| adapt_batch(&mut model, &refs, &names, &templates, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, corruption_batch, encoder, latte_iteration);
criterion_main!(benches);
