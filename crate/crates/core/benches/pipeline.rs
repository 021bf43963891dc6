//! Hot paths on the synthetic scene, run on the full rayon pool and on a
//! one-thread pool. Without the `parallel` feature both rows are sequential.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splatseg::association::{associate, AssociationConfig};
use splatseg::codebook::{build_two_level, kmeans_restarts, CodebookConfig, Samples, Seeding};
use splatseg::render::{backprop_features, compute_blend_weights, render_features};
use splatseg::synth::{generate_synthetic, SyntheticScene, SyntheticSceneSpec};
use splatseg::Feature;

fn scene() -> SyntheticScene {
    generate_synthetic(&SyntheticSceneSpec {
        instances: 16,
        points_per_instance: 500,
        width: 128,
        height: 128,
        ..Default::default()
    })
    .unwrap()
}

fn features(syn: &SyntheticScene) -> Vec<Feature> {
    syn.labels
        .iter()
        .enumerate()
        .map(|(i, &l)| std::array::from_fn(|c| ((l * 7 + c) % 5) as f64 + 1e-3 * (i % 11) as f64))
        .collect()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    [("parallel", all), ("sequential", 1)]
        .into_iter()
        .map(|(name, n)| (name, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn bench_render(c: &mut Criterion) {
    let syn = scene();
    let f = features(&syn);
    let cam = &syn.cameras[0];
    let mut group = c.benchmark_group("render");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("blend_weights", name), |b| {
            pool.install(|| b.iter(|| compute_blend_weights(black_box(&syn.scene), cam)))
        });
        let w = compute_blend_weights(&syn.scene, cam);
        let map = render_features(&w, &f).unwrap();
        group.bench_function(BenchmarkId::new("features_and_adjoint", name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let m = render_features(&w, black_box(&f)).unwrap();
                    backprop_features(&m, &w).unwrap()
                })
            })
        });
        black_box(&map);
    }
    group.finish();
}

fn bench_codebook(c: &mut Criterion) {
    let syn = scene();
    let f = features(&syn);
    let samples = Samples::from_features(&f);
    let positions = syn.scene.positions();
    let cfg = CodebookConfig {
        coarse_k: 16,
        ..Default::default()
    };
    let mut group = c.benchmark_group("codebook");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("kmeans_restarts", name), |b| {
            pool.install(|| b.iter(|| kmeans_restarts(&samples, 64, 0, Seeding::PlusPlus, 50, 8)))
        });
        group.bench_function(BenchmarkId::new("two_level", name), |b| {
            pool.install(|| b.iter(|| build_two_level(&f, &positions, &cfg, 0).unwrap()))
        });
    }
    group.finish();
}

fn bench_association(c: &mut Criterion) {
    let syn = scene();
    let f = features(&syn);
    let cfg = CodebookConfig {
        coarse_k: 16,
        ..Default::default()
    };
    let codebook = build_two_level(&f, &syn.scene.positions(), &cfg, 0).unwrap();
    let mut group = c.benchmark_group("association");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("associate", name), |b| {
            pool.install(|| {
                b.iter(|| {
                    associate(&syn.scene, &codebook, &syn.views, &f, &AssociationConfig::default())
                        .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_codebook, bench_association);
criterion_main!(benches);
