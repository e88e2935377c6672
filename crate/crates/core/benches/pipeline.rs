use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maskflow::analysis::{separability_sweep, SweepInput};
use maskflow::data::{generate_scene, SceneConfig};
use maskflow::dit::{Dit, ModelConfig};
use maskflow::flow::VelocityModel;
use maskflow::tensor::{par, Prng, Tensor};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn scene_generation(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    let mut group = c.benchmark_group("generate_256_scenes");
    for (label, sequential) in MODES {
        group.bench_function(label, |b| {
            par::set_sequential(sequential);
            b.iter(|| par::map_range(256, |i| generate_scene(0, i as u64, &cfg)));
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn probe_sweep(c: &mut Criterion) {
    let mut prng = Prng::new(2, 0);
    let n = 64;
    let latents = Tensor::randn(&[n, 8, 8, 16], 1.0, &mut prng);
    let masks: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..1024).map(|_| if prng.uniform() < 0.3 { 255 } else { 0 }).collect())
        .collect();
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let input = SweepInput {
        train: &latents,
        train_masks: &refs,
        val: &latents,
        val_masks: &refs,
        size: 32,
        lambda: 1e-3,
        balance: true,
    };
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut group = c.benchmark_group("probe_sweep_11x3");
    group.sample_size(10);
    for (label, sequential) in MODES {
        group.bench_function(label, |b| {
            par::set_sequential(sequential);
            b.iter(|| separability_sweep(&input, &grid, &[0, 1, 2]).unwrap());
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn batched_inference(c: &mut Criterion) {
    let model = Dit::new(ModelConfig::default(), 0).unwrap();
    let m = &model.config;
    let mut prng = Prng::new(3, 0);
    let mut group = c.benchmark_group("one_step_velocity");
    group.sample_size(10);
    for batch in [16, 64] {
        let x = Tensor::randn(&[batch, m.grid_h, m.grid_w, m.channels], 1.0, &mut prng);
        let clean = Tensor::randn(x.shape(), 1.0, &mut prng);
        let cond = vec![vec![1, 2, 8]; batch];
        for (label, sequential) in MODES {
            group.bench_with_input(BenchmarkId::new(label, batch), &batch, |b, _| {
                par::set_sequential(sequential);
                b.iter(|| model.velocity(&x, 1.0, &cond, Some(&clean)).unwrap());
            });
        }
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, scene_generation, probe_sweep, batched_inference);
criterion_main!(benches);
