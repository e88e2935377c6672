//! Mixed-task training of the transformer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{adam_step, checkpoint, AdamState, Bound, Element, ParamSet, Prng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::data::{mask_to_rgb, to_model_space, Sample, NULL};
use crate::dit::{forward, Dit, ModelConfig};
use crate::flow::{
    bce_decoder_loss, bce_linear_loss, make_path, mask_targets, mse_loss, predict_x0_graph, MaskReadout, Supervision,
    Task,
};
use crate::samplers::{GenSampler, SegSampler};
use crate::{Error, Result};

pub const REFERENCE_LR_MAX: f64 = 5e-5;
pub const REFERENCE_LR_MIN: f64 = 1e-5;
pub const DESK_LR_SCALE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub mix_seg: u32,
    pub mix_gen: u32,
    pub seg_a: f64,
    pub supervision: Supervision,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cfg_dropout: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 8000,
            batch: 32,
            mix_seg: 1,
            mix_gen: 1,
            seg_a: SegSampler::DEFAULT_A,
            supervision: Supervision::MseLatent,
            lr_max: REFERENCE_LR_MAX * DESK_LR_SCALE,
            lr_min: REFERENCE_LR_MIN * DESK_LR_SCALE,
            cfg_dropout: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.mix_seg + self.mix_gen == 0 {
            return Err(Error::Config("mix ratio needs a positive component".into()));
        }
        if !(self.lr_min <= self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!("lr_min {} must be in [0, lr_max {}]", self.lr_min, self.lr_max)));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::Config(format!("cfg_dropout {} outside [0, 1]", self.cfg_dropout)));
        }
        SegSampler::new(self.seg_a).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Stable hex digest of the serialized config.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let words: Vec<u64> = text.bytes().map(u64::from).collect();
        format!("{:016x}", stream_id(&words))
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::domain("cosine_lr", format!("step {step} beyond total {total}")));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Segmentation conditions are never dropped.
pub fn cfg_dropout(cond: Vec<usize>, task: Task, p: f64, prng: &mut Prng) -> Vec<usize> {
    if task == Task::Generation && p > 0.0 && prng.uniform() < p {
        vec![NULL]
    } else {
        cond
    }
}

/// Encoded training records.
#[derive(Clone, Debug)]
pub struct LatentCorpus {
    pub images: Tensor,
    pub mask_latents: Tensor,
    pub masks: Vec<Vec<u8>>,
    pub queries: Vec<Vec<usize>>,
    pub captions: Vec<Vec<usize>>,
    pub size: usize,
}

impl LatentCorpus {
    pub fn build(codec: &Codec, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("corpus needs at least one sample".into()));
        }
        let (images, mask_latents) = codec.encode_samples(samples)?;
        Ok(LatentCorpus {
            images,
            mask_latents,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            queries: samples.iter().map(|s| s.query.clone()).collect(),
            captions: samples.iter().map(|s| s.caption.clone()).collect(),
            size: samples[0].size,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
        let per: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(&shape, data).expect("gathered rows")
    }
}

/// One task's share of a training batch.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: Task,
    pub indices: Vec<usize>,
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f32>,
    pub x_t: Tensor,
    pub v_target: Tensor,
    pub cond: Vec<Vec<usize>>,
    /// Clean image latent, segmentation only.
    pub clean: Option<Tensor>,
    /// Target masks, segmentation only.
    pub masks: Option<Vec<Vec<u8>>>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub seg: Option<TaskBatch>,
    pub gen: Option<TaskBatch>,
}

impl FlowBatch {
    pub fn fingerprint(&self) -> u64 {
        let ids: Vec<u64> = self
            .seg
            .iter()
            .chain(&self.gen)
            .flat_map(|b| b.indices.iter().map(|&i| i as u64))
            .collect();
        stream_id(&ids)
    }
}

/// Split of `batch` by `seg:gen`; at 1:1 the counts differ by at most one.
pub fn task_counts(batch: usize, seg: u32, gen: u32) -> (usize, usize) {
    let total = (seg + gen) as f64;
    let n_seg = if gen == 0 {
        batch
    } else if seg == 0 {
        0
    } else {
        ((batch as f64 * seg as f64 / total).round() as usize).min(batch)
    };
    (n_seg, batch - n_seg)
}

/// Draws the batch for `step` from its own stream, so any step can be
/// reproduced without replaying earlier ones.
pub fn mixed_batch(corpus: &LatentCorpus, cfg: &TrainConfig, step: usize) -> Result<FlowBatch> {
    let (n_seg, n_gen) = task_counts(cfg.batch, cfg.mix_seg, cfg.mix_gen);
    if corpus.is_empty() && cfg.batch > 0 {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut prng = Prng::new(cfg.seed, stream_id(&[0xba7c, step as u64]));
    let seg_sampler = SegSampler::new(cfg.seg_a)?;
    let mut make = |task: Task, n: usize| -> Result<Option<TaskBatch>> {
        if n == 0 {
            return Ok(None);
        }
        let indices: Vec<usize> = (0..n).map(|_| prng.below(corpus.len())).collect();
        let t: Vec<f32> = (0..n)
            .map(|_| match task {
                Task::Segmentation => seg_sampler.sample(&mut prng) as f32,
                Task::Generation => GenSampler.sample(&mut prng) as f32,
            })
            .collect();
        let source = match task {
            Task::Segmentation => &corpus.mask_latents,
            Task::Generation => &corpus.images,
        };
        let x0 = LatentCorpus::gather(source, &indices);
        let eps = Tensor::randn(x0.shape(), 1.0, &mut prng);
        let (x_t, v_target) = make_path(&x0, &eps, &t)?;
        let cond = indices
            .iter()
            .map(|&i| match task {
                Task::Segmentation => corpus.queries[i].clone(),
                Task::Generation => cfg_dropout(corpus.captions[i].clone(), task, cfg.cfg_dropout, &mut prng),
            })
            .collect();
        let seg = task == Task::Segmentation;
        Ok(Some(TaskBatch {
            task,
            clean: seg.then(|| LatentCorpus::gather(&corpus.images, &indices)),
            masks: seg.then(|| indices.iter().map(|&i| corpus.masks[i].clone()).collect()),
            indices,
            x0,
            eps,
            t,
            x_t,
            v_target,
            cond,
        }))
    };
    let seg = make(Task::Segmentation, n_seg)?;
    let gen = make(Task::Generation, n_gen)?;
    Ok(FlowBatch { seg, gen })
}

/// Head parameters for the chosen supervision, prefixed `head.`.
pub fn init_head(sup: Supervision, latent: usize, factor: usize) -> ParamSet {
    let mut p = ParamSet::new();
    match sup {
        Supervision::MseLatent => {}
        Supervision::BceDecoder => {
            p.insert("head.scale", Tensor::full(&[1], 4.0));
            p.insert("head.bias", Tensor::zeros(&[1]));
        }
        Supervision::BceLinear => {
            p.insert("head.w", Tensor::zeros(&[latent, factor * factor]));
            p.insert("head.b", Tensor::zeros(&[factor * factor]));
        }
    }
    p
}

/// Loss of one task batch on `tape`. Parameters are bound with `dit.` and
/// `head.` prefixes; `codec` is needed only for the through-decoder head.
pub fn task_loss<T: Element>(
    tape: &mut Tape<T>,
    params: &Bound,
    cfg: &TrainConfig,
    batch: &TaskBatch,
    codec: Option<(&Codec, &Bound)>,
) -> Result<Var> {
    let model = params.scope("dit.");
    let head = params.scope("head.");
    let x_t = tape.constant(batch.x_t.cast());
    let clean = match (batch.task, cfg.model.shortcut) {
        (Task::Segmentation, true) => batch.clean.as_ref().map(|c| tape.constant(c.cast())),
        _ => None,
    };
    let t: Vec<f64> = batch.t.iter().map(|&t| t as f64).collect();
    let v = forward(tape, &model, &cfg.model, batch.task, x_t, &t, &batch.cond, clean)?;
    let sup = match batch.task {
        Task::Generation => Supervision::MseLatent,
        Task::Segmentation => cfg.supervision,
    };
    match sup {
        Supervision::MseLatent => {
            let target = tape.constant(batch.v_target.cast());
            mse_loss(tape, v, target)
        }
        Supervision::BceDecoder | Supervision::BceLinear => {
            let masks = batch
                .masks
                .as_ref()
                .ok_or_else(|| Error::domain("task_loss", "segmentation batch without masks"))?;
            let size = (masks[0].len() as f64).sqrt() as usize;
            let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
            let target = tape.constant(mask_targets::<T>(&refs, size)?);
            let x0 = predict_x0_graph(tape, x_t, &batch.t, v)?;
            if sup == Supervision::BceDecoder {
                let (codec, cp) = codec.ok_or_else(|| Error::domain("task_loss", "decoder head needs the codec"))?;
                bce_decoder_loss(tape, x0, target, codec, cp, &head)
            } else {
                let factor = size / cfg.model.grid_h;
                bce_linear_loss(tape, x0, target, &head, factor)
            }
        }
    }
}

/// Count-weighted mean of the task losses; returns `(total, seg, gen)`.
pub fn batch_loss<T: Element>(
    tape: &mut Tape<T>,
    params: &Bound,
    cfg: &TrainConfig,
    batch: &FlowBatch,
    codec: Option<(&Codec, &Bound)>,
) -> Result<(Var, Option<Var>, Option<Var>)> {
    let mut parts = Vec::new();
    let mut seg = None;
    let mut gen = None;
    for b in batch.seg.iter().chain(&batch.gen) {
        let l = task_loss(tape, params, cfg, b, codec)?;
        match b.task {
            Task::Segmentation => seg = Some(l),
            Task::Generation => gen = Some(l),
        }
        parts.push((l, b.len()));
    }
    let n: usize = parts.iter().map(|p| p.1).sum();
    let mut total: Option<Var> = None;
    for (l, k) in parts {
        let w = tape.scale(l, k as f64 / n as f64);
        total = Some(match total {
            None => w,
            Some(acc) => tape.add(acc, w)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok((total, seg, gen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    /// Transformer under `dit.`, loss head under `head.`.
    pub params: ParamSet,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    config: TrainConfig,
    adam: AdamState,
    codec_factor: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, latent: usize, factor: usize) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let dit = Dit::new(config.model.clone(), config.seed)?;
        params.extend_prefixed("dit.", dit.params);
        for (k, v) in init_head(config.supervision, latent, factor).into_map() {
            params.insert(k, v);
        }
        let adam = AdamState::new(config.lr_max);
        Ok(TrainState {
            config,
            step: 0,
            params,
            adam,
        })
    }

    pub fn model(&self) -> Dit {
        Dit {
            config: self.config.model.clone(),
            params: self.params.strip_prefix("dit."),
        }
    }

    pub fn head(&self) -> ParamSet {
        self.params.strip_prefix("head.")
    }

    /// The mask readout matching this run's supervision.
    pub fn readout<'a>(&'a self, codec: &'a Codec, head: &'a ParamSet) -> Result<MaskReadout<'a>> {
        Ok(match self.config.supervision {
            Supervision::BceLinear => MaskReadout::Linear {
                w: head.get("w")?,
                b: head.get("b")?,
                factor: codec.config.factor,
            },
            _ => MaskReadout::Decoder(codec),
        })
    }

    /// Writes `params.ckpt`, `optim.ckpt` and `state.json` under `dir`.
    pub fn save(&self, dir: &Path, codec_factor: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("params.ckpt"), self.params.as_map())?;
        checkpoint::save(&dir.join("optim.ckpt"), &self.adam.moments())?;
        let state = StateFile {
            step: self.step,
            config: self.config.clone(),
            adam: self.adam.clone(),
            codec_factor,
        };
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        checkpoint::write_atomic(&dir.join("state.json"), (text + "\n").as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                path: path.clone(),
                hint: "train",
            },
            _ => Error::io(&path, e),
        })?;
        let state: StateFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        state.config.validate()?;
        let params = ParamSet::from_map(checkpoint::load(&dir.join("params.ckpt"))?);
        let mut adam = state.adam;
        adam.restore_moments(&checkpoint::load(&dir.join("optim.ckpt"))?);
        let fresh = TrainState::new(state.config.clone(), state.config.model.channels, state.codec_factor)?;
        for (k, t) in fresh.params.iter() {
            match params.get(k) {
                Ok(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::format(dir.join("params.ckpt"), format!("tensor {k} missing or misshapen"))),
            }
        }
        Ok(TrainState {
            config: state.config,
            step: state.step,
            params,
            adam,
        })
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub seg_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub lr: f64,
}

pub fn train_step(state: &mut TrainState, corpus: &LatentCorpus, codec: &Codec) -> Result<StepReport> {
    let cfg = state.config.clone();
    let step = state.step;
    let batch = mixed_batch(corpus, &cfg, step)?;
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let frozen = (cfg.supervision == Supervision::BceDecoder).then(|| codec.params.bind(&mut tape, false));
    let codec_arg = frozen.as_ref().map(|b| (codec, b));
    let (total, seg, gen) = batch_loss(&mut tape, &bound, &cfg, &batch, codec_arg)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).data()[0] as f64);
    let loss = tape.value(total).data()[0] as f64;
    let (seg_loss, gen_loss) = (value(seg), value(gen));
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            fingerprint: batch.fingerprint(),
        });
    }
    let grads = tape.backward(total)?;
    let grads: BTreeMap<String, Tensor> = bound.gradients(&grads);
    let lr = cosine_lr(step, cfg.steps.max(step), cfg.lr_max, cfg.lr_min)?;
    state.adam.lr = lr;
    adam_step(&mut state.params, &grads, &mut state.adam)?;
    state.step += 1;
    Ok(StepReport {
        step,
        loss,
        seg_loss,
        gen_loss,
        lr,
    })
}

pub fn write_log(report: &StepReport, out: &mut dyn Write) -> Result<()> {
    let lines = [
        ("total", Some(report.loss)),
        ("segmentation", report.seg_loss),
        ("generation", report.gen_loss),
    ];
    for (task, loss) in lines {
        if let Some(loss) = loss {
            let line = LogLine {
                step: report.step,
                task: task.to_string(),
                loss,
                lr: report.lr,
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("log serializes"))
                .map_err(|e| Error::io("<log>", e))?;
        }
    }
    Ok(())
}

/// Runs `state` up to `until` steps, checkpointing into `out/step-NNNNNN`
/// every `checkpoint_every` steps when `out` is given.
pub fn train_until(
    state: &mut TrainState,
    until: usize,
    corpus: &LatentCorpus,
    codec: &Codec,
    out: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepReport>> {
    let mut reports = Vec::with_capacity(until.saturating_sub(state.step));
    while state.step < until {
        let r = train_step(state, corpus, codec)?;
        if let Some(w) = log.as_deref_mut() {
            write_log(&r, w)?;
        }
        reports.push(r);
        let every = state.config.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && state.step % every == 0 && state.step < until {
                state.save(&dir.join(format!("step-{:06}", state.step)), codec.config.factor)?;
            }
        }
    }
    Ok(reports)
}

/// Full run from initialization; writes the final state to `out/final`.
pub fn train(
    config: &TrainConfig,
    corpus: &LatentCorpus,
    codec: &Codec,
    out: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<(TrainState, Vec<StepReport>)> {
    let mut state = TrainState::new(config.clone(), codec.latent_channels(), codec.config.factor)?;
    let shape = corpus.latent_shape();
    let m = &config.model;
    if shape != [m.grid_h, m.grid_w, m.channels] {
        return Err(Error::Config(format!(
            "latent grid {shape:?} does not match model {}x{}x{}",
            m.grid_h, m.grid_w, m.channels
        )));
    }
    let reports = train_until(&mut state, config.steps, corpus, codec, out, log)?;
    if let Some(dir) = out {
        state.save(&dir.join("final"), codec.config.factor)?;
    }
    Ok((state, reports))
}

/// Mean of each `window`-sized block of losses.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Raw images and mask renderings in model space, stacked `[N, H, W, 3]`.
pub fn model_space_batches(samples: &[Sample]) -> (Tensor, Tensor) {
    let size = samples.first().map_or(0, |s| s.size);
    let mut im = Vec::new();
    let mut mk = Vec::new();
    for s in samples {
        im.extend(to_model_space(&s.image));
        mk.extend(to_model_space(&mask_to_rgb(&s.mask)));
    }
    let shape = [samples.len(), size, size, 3];
    (Tensor::new(&shape, im).unwrap(), Tensor::new(&shape, mk).unwrap())
}
