use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use geofuse::data::dataset::{synth_split, Split, SynthConfig};
use geofuse::data::RenderOptions;
use geofuse::encoder::EncoderConfig;
use geofuse::model::{GeoFuseModel, ModelConfig};
use geofuse::parallel::ExecMode;
use geofuse::verify::{run_suite, Scope};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn synth() -> SynthConfig {
    SynthConfig {
        classes: 8,
        train_views: 4,
        test_views: 4,
        size: 32,
        seed: 1,
        render: RenderOptions::default(),
        disjoint_test: false,
        train_captures: 2,
    }
}

fn bench_synth(c: &mut Criterion) {
    let cfg = synth();
    let mut group = c.benchmark_group("synth_split");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| synth_split(&cfg, Split::Train, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_embeddings(c: &mut Criterion) {
    let (split, _) = synth_split(&synth(), Split::Train, ExecMode::Parallel).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            image_size: 32,
            patch_size: 8,
            d_model: 32,
            depth: 1,
            heads: 4,
            ..EncoderConfig::default()
        },
        fusion_heads: 4,
        channel_heads: 4,
        ..ModelConfig::default()
    };
    let model = GeoFuseModel::new(config, split.classes.clone(), 3).unwrap();
    let drones: Vec<_> = split.drone.iter().map(|(_, img)| img).collect();
    let mut group = c.benchmark_group("embeddings");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new("drone", name), |b| {
            b.iter(|| model.drone_features(&drones, mode).unwrap())
        });
        group.bench_function(BenchmarkId::new("fused_gallery", name), |b| {
            b.iter(|| model.pair_feature_matrices(&split.satellite, &split.roadmap, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_fusion");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_suite(Scope::Fusion, mode)));
    }
    group.finish();
}

criterion_group!(benches, bench_synth, bench_embeddings, bench_gradcheck);
criterion_main!(benches);
