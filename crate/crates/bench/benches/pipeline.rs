use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use veinforge::config::PipelineConfig;
use veinforge::extract::{binarize_median, connect_scores, max_curvature_scores};
use veinforge::geometry::mesh_phantom;
use veinforge::matching::{compare_features, extract_features, miura_correlation};
use veinforge::render::render_nir;
use veinforge_bench::{fixture_image, fixture_phantom};

fn extraction(c: &mut Criterion) {
    let img = fixture_image(1);
    let cfg = PipelineConfig::default().extraction;
    c.bench_function("max_curvature_900x180", |b| {
        b.iter(|| binarize_median(&connect_scores(&max_curvature_scores(black_box(&img), &cfg).unwrap())))
    });
}

fn matching(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let a = extract_features(&fixture_image(1), &cfg.extraction).unwrap();
    let b = extract_features(&fixture_image(2), &cfg.extraction).unwrap();
    c.bench_function("miura_correlation_cw30", |bn| {
        bn.iter(|| miura_correlation(black_box(&a.mask), black_box(&b.mask), &cfg.matching).unwrap())
    });
    c.bench_function("compare_icp", |bn| {
        bn.iter(|| compare_features(black_box(&a), black_box(&b), &cfg.matching).unwrap())
    });
}

fn rendering(c: &mut Criterion) {
    let model = fixture_phantom(3);
    let cfg = PipelineConfig::default();
    let mut group = c.benchmark_group("render");
    group.sample_size(10);
    group.bench_function("render_default_phantom", |b| b.iter(|| render_nir(black_box(&model), &cfg.render, 0).unwrap()));
    group.bench_function("mesh_default_phantom", |b| {
        b.iter(|| mesh_phantom(black_box(&model), cfg.phantom.angular_steps).unwrap())
    });
    group.finish();
}

criterion_group!(benches, extraction, matching, rendering);
criterion_main!(benches);
