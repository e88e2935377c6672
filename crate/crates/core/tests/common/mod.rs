#![allow(dead_code)]

use maskflow::codec::{Codec, CodecConfig};
use maskflow::dit::{init_params, ModelConfig};
use maskflow::flow::{make_path, Supervision, Task};
use maskflow::tensor::{grad_check_params, GradCheckReport, ParamSet, Prng, Tensor};
use maskflow::train::{init_head, task_loss, TaskBatch, TrainConfig};

/// Two blocks on a 4×4×4 latent grid.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        grid_h: 4,
        grid_w: 4,
        channels: 4,
        cond_dim: 8,
        max_cond: 4,
        freqs: 8,
        ..ModelConfig::default()
    }
}

/// Factor-2 codec for 8×8 images with 4 latent channels.
pub fn tiny_codec(seed: u64) -> Codec {
    let cfg = CodecConfig {
        factor: 2,
        latent: 4,
        widths: vec![4, 4],
        ..CodecConfig::default()
    };
    Codec::new(cfg, seed).unwrap()
}

/// Same names and shapes as `p`, every entry redrawn with `std`.
pub fn redraw(p: &ParamSet, std: f64, seed: u64) -> ParamSet<f64> {
    let mut prng = Prng::new(seed, 77);
    let mut out = ParamSet::new();
    for (k, t) in p.iter() {
        out.insert(k.clone(), Tensor::<f64>::randn(t.shape(), std, &mut prng));
    }
    out
}

/// Hand-built task batch of `n` samples on the tiny grid.
pub fn tiny_batch(task: Task, n: usize, seed: u64) -> TaskBatch {
    let mut prng = Prng::new(seed, 5);
    let shape = [n, 4, 4, 4];
    let x0 = Tensor::randn(&shape, 1.0, &mut prng);
    let eps = Tensor::randn(&shape, 1.0, &mut prng);
    let t: Vec<f32> = (0..n).map(|_| 0.2 + 0.7 * prng.uniform() as f32).collect();
    let (x_t, v_target) = make_path(&x0, &eps, &t).unwrap();
    let seg = task == Task::Segmentation;
    let cond = (0..n)
        .map(|i| if seg { vec![1, 2 + i % 6, 8 + i % 3] } else { vec![2 + i % 6, 8 + i % 3] })
        .collect();
    let masks: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..64).map(|_| if prng.uniform() < 0.3 { 255 } else { 0 }).collect())
        .collect();
    TaskBatch {
        task,
        indices: (0..n).collect(),
        clean: seg.then(|| Tensor::randn(&shape, 1.0, &mut prng)),
        masks: seg.then_some(masks),
        x0,
        eps,
        t,
        x_t,
        v_target,
        cond,
    }
}

/// Finite-difference check of the full task loss over every transformer
/// and head parameter, in f64.
pub fn dit_grad_check(sup: Supervision, task: Task, step: f64) -> (GradCheckReport, usize) {
    let cfg = TrainConfig {
        model: tiny_model(),
        supervision: sup,
        ..TrainConfig::default()
    };
    let codec = tiny_codec(3);
    let mut p = ParamSet::new();
    p.extend_prefixed("dit.", init_params(&cfg.model, 1));
    for (k, v) in init_head(sup, 4, 2).into_map() {
        p.insert(k, v);
    }
    let params = redraw(&p, 0.3, 2);
    let codec_params: ParamSet<f64> = codec.params.cast();
    let batch = tiny_batch(task, 2, 9);
    let report = grad_check_params(
        |tape, bound| {
            let cp = codec_params.bind(tape, false);
            let arg = (sup == Supervision::BceDecoder).then_some((&codec, &cp));
            task_loss::<f64>(tape, bound, &cfg, &batch, arg).map_err(|e| match e {
                maskflow::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        &params,
        step,
    )
    .unwrap();
    (report, params.count())
}
