//! End-to-end costs (model inference, a training epoch, metric scoring) with
//! the rayon pool enabled and disabled at runtime.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use s2fuse_core::autograd::par;
use s2fuse_core::dataset::{make_sample, Landscape, SampleTriple, SceneCrop, WALD_SIGMA};
use s2fuse_core::metrics::{score, PsnrMode};
use s2fuse_core::network::{InitScheme, ModelConfig, UnfoldedModel};
use s2fuse_core::synth::generate_scene;
use s2fuse_core::training::{train, TrainConfig, TrainOutputs};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn sample(size: usize, seed: u64) -> SampleTriple {
    let (hr, lr) = generate_scene(Landscape::Mixed, size, seed);
    let crop = SceneCrop::new("0_0".into(), Landscape::Mixed, hr, lr).unwrap();
    make_sample(&crop, WALD_SIGMA).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        stages: 2,
        width: 32,
        ..ModelConfig::default()
    }
}

fn inference(c: &mut Criterion) {
    let s = sample(240, 1);
    let (f, hr4) = (s.input_f.to_tensor(), s.guide_src.to_tensor());
    let model = UnfoldedModel::new(ModelConfig::default(), 0, InitScheme::FanIn).unwrap();
    let mut group = c.benchmark_group("infer_default_model_120px");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(name, |b| b.iter(|| black_box(model.infer(&f, &hr4).unwrap())));
    }
    group.finish();
    par::set_enabled(true);
}

fn training_epoch(c: &mut Criterion) {
    let samples: Vec<SampleTriple> = (0..4).map(|i| sample(64, i)).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        model: small_model(),
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch_4x32px_k2_w32");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("batch4", name), |b| {
            b.iter(|| black_box(train(&cfg, &samples, &samples[..1], &TrainOutputs::default(), |_| {}).unwrap()))
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn metrics(c: &mut Criterion) {
    let s = sample(240, 2);
    let reference = s.reference.to_tensor();
    let pred = reference.map(|v| v * 0.97 + 0.01);
    let mut group = c.benchmark_group("score_120px");
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(name, |b| b.iter(|| black_box(score(&pred, &reference, PsnrMode::Joint).unwrap())));
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, inference, training_epoch, metrics);
criterion_main!(benches);
