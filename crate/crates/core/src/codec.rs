//! Convolutional autoencoder providing the latent grid.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{adam_step, checkpoint, par, AdamState, Bound, Element, ParamSet, Prng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{mask_to_rgb, to_model_space, Sample};
use crate::nn::{conv, depth_to_space, init_conv};
use crate::train::cosine_lr;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Spatial downsampling; a power of two.
    pub factor: usize,
    pub latent: usize,
    /// Channel widths, one more entry than stride-2 stages.
    pub widths: Vec<usize>,
    /// Zero selects the plain autoencoder.
    pub kl_weight: f64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub calibration: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            factor: 4,
            latent: 16,
            widths: vec![16, 32, 32],
            kl_weight: 0.0,
            batch: 16,
            lr_max: 3e-3,
            lr_min: 1e-4,
            calibration: 1024,
        }
    }
}

impl CodecConfig {
    pub fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!("codec factor {} is not a power of two", self.factor)));
        }
        if self.widths.len() != self.stages() + 1 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "codec needs {} nonzero widths for factor {}",
                self.stages() + 1,
                self.factor
            )));
        }
        if self.latent == 0 || self.batch == 0 {
            return Err(Error::Config("codec latent channels and batch must be positive".into()));
        }
        Ok(())
    }

    fn encoder_out(&self) -> usize {
        if self.kl_weight > 0.0 {
            2 * self.latent
        } else {
            self.latent
        }
    }
}

pub fn init_params(cfg: &CodecConfig, seed: u64) -> ParamSet {
    let mut prng = Prng::new(seed, stream_id(&[0xc0dec]));
    let mut p = ParamSet::new();
    let w = &cfg.widths;
    let k = cfg.stages();
    init_conv(&mut p, "enc.in", 3, 3, w[0], &mut prng);
    for i in 1..=k {
        init_conv(&mut p, &format!("enc.down{i}"), 3, w[i - 1], w[i], &mut prng);
    }
    init_conv(&mut p, "enc.out", 1, w[k], cfg.encoder_out(), &mut prng);
    init_conv(&mut p, "dec.in", 1, cfg.latent, w[k], &mut prng);
    for i in (1..=k).rev() {
        init_conv(&mut p, &format!("dec.up{i}"), 3, w[i], 4 * w[i - 1], &mut prng);
    }
    init_conv(&mut p, "dec.out", 3, w[0], 3, &mut prng);
    p
}

/// Encoder on the tape; returns raw (unnormalized) latents, or the
/// posterior mean and log-variance stacked on channels in variational mode.
pub fn encode_graph<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &CodecConfig, x: Var) -> Result<Var> {
    let mut h = conv(tape, p, "enc.in", x, 1)?;
    h = tape.silu(h);
    for i in 1..=cfg.stages() {
        h = conv(tape, p, &format!("enc.down{i}"), h, 2)?;
        h = tape.silu(h);
    }
    conv(tape, p, "enc.out", h, 1)
}

/// Decoder on the tape from raw latents; output is unclamped.
pub fn decode_graph<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &CodecConfig, z: Var) -> Result<Var> {
    let mut h = conv(tape, p, "dec.in", z, 1)?;
    h = tape.silu(h);
    for i in (1..=cfg.stages()).rev() {
        h = conv(tape, p, &format!("dec.up{i}"), h, 1)?;
        h = depth_to_space(tape, h)?;
        h = tape.silu(h);
    }
    conv(tape, p, "dec.out", h, 1)
}

/// Per-channel affine normalization of raw latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentNorm {
    pub fn identity(d: usize) -> Self {
        LatentNorm {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Raw latents `[.., d]` to normalized.
    pub fn apply(&self, raw: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    /// Normalized latents on the tape back to raw.
    pub fn invert_graph<T: Element>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let d = self.mean.len();
        let std = tape.constant(Tensor::from_fn(&[d], |c| T::of(self.std[c] as f64)));
        let mean = tape.constant(Tensor::from_fn(&[d], |c| T::of(self.mean[c] as f64)));
        let y = tape.mul(z, std)?;
        Ok(tape.add(y, mean)?)
    }
}

/// Trained codec: parameters plus latent normalization.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet,
    pub norm: LatentNorm,
}

const CHUNK: usize = 16;

fn stack(images: &[&[f32]], shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
    for im in images {
        data.extend_from_slice(im);
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::new(&full, data).expect("stacked images match shape")
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        let norm = LatentNorm::identity(config.latent);
        Ok(Codec { config, params, norm })
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = self.config.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::domain(
                "encode",
                format!("{h}x{w} image not divisible by factor {f}"),
            ));
        }
        Ok(())
    }

    /// Raw latents for `[B, H, W, 3]` model-space images (posterior mean).
    pub fn encode_raw(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::domain("encode", format!("expected [B, H, W, 3], got {s:?}")));
        }
        self.check_size(s[1], s[2])?;
        let (b, per) = (s[0], s[1] * s[2] * 3);
        let chunks = b.div_ceil(CHUNK);
        let d = self.config.latent;
        let parts = par::map_range(chunks, |c| -> Result<Tensor> {
            let lo = c * CHUNK;
            let n = CHUNK.min(b - lo);
            let x = Tensor::new(&[n, s[1], s[2], 3], images.data()[lo * per..(lo + n) * per].to_vec())?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let mut z = encode_graph(&mut tape, &p, &self.config, xv)?;
            if self.config.kl_weight > 0.0 {
                z = tape.slice(z, 3, 0, d)?;
            }
            Ok(tape.value(z).clone())
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    /// Normalized latents `[B, h, w, d]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.norm.apply(&self.encode_raw(images)?))
    }

    /// Model-space images from normalized latents, clamped to `[−1, 1]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.shape();
        if s.len() != 4 || s[3] != self.config.latent {
            return Err(Error::domain(
                "decode",
                format!("expected [B, h, w, {}], got {s:?}", self.config.latent),
            ));
        }
        let (b, per) = (s[0], s[1] * s[2] * s[3]);
        let chunks = b.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |c| -> Result<Tensor> {
            let lo = c * CHUNK;
            let n = CHUNK.min(b - lo);
            let z = Tensor::new(&[n, s[1], s[2], s[3]], latents.data()[lo * per..(lo + n) * per].to_vec())?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let zv = tape.constant(z);
            let raw = self.norm.invert_graph(&mut tape, zv)?;
            let y = decode_graph(&mut tape, &p, &self.config, raw)?;
            let y = tape.clamp(y, -1.0, 1.0);
            Ok(tape.value(y).clone())
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    pub fn encode_samples(&self, samples: &[Sample]) -> Result<(Tensor, Tensor)> {
        let size = samples.first().map_or(0, |s| s.size);
        let images: Vec<Vec<f32>> = samples.iter().map(|s| to_model_space(&s.image)).collect();
        let masks: Vec<Vec<f32>> = samples
            .iter()
            .map(|s| to_model_space(&mask_to_rgb(&s.mask)))
            .collect();
        let shape = [size, size, 3];
        let im = stack(&images.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &shape);
        let mk = stack(&masks.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &shape);
        Ok((self.encode(&im)?, self.encode(&mk)?))
    }

    /// Fits the per-channel mean and std on raw latents of `images`.
    pub fn calibrate(&mut self, images: &Tensor) -> Result<()> {
        let raw = self.encode_raw(images)?;
        let d = self.config.latent;
        let rows = raw.numel() / d;
        let mut mean = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for (i, &v) in raw.data().iter().enumerate() {
            mean[i % d] += v as f64;
            sq[i % d] += (v as f64) * (v as f64);
        }
        let mut norm = LatentNorm::identity(d);
        for c in 0..d {
            let m = mean[c] / rows as f64;
            let var = (sq[c] / rows as f64 - m * m).max(0.0);
            norm.mean[c] = m as f32;
            norm.std[c] = var.sqrt().max(1e-6) as f32;
        }
        self.norm = norm;
        Ok(())
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map = self.params.as_map().clone();
        let d = self.config.latent;
        map.insert("norm.mean".into(), Tensor::new(&[d], self.norm.mean.clone()).unwrap());
        map.insert("norm.std".into(), Tensor::new(&[d], self.norm.std.clone()).unwrap());
        map
    }

    /// Writes `codec.ckpt` and `codec.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("codec.ckpt"), &self.to_tensors())?;
        let path = dir.join("codec.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        checkpoint::write_atomic(&path, (text + "\n").as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("codec.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                path: path.clone(),
                hint: "train-codec",
            },
            _ => Error::io(&path, e),
        })?;
        let config: CodecConfig = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        config.validate()?;
        let mut map = checkpoint::load(&dir.join("codec.ckpt"))?;
        let take = |map: &mut BTreeMap<String, Tensor>, k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::format(dir.join("codec.ckpt"), format!("missing tensor {k}")))
        };
        let mean = take(&mut map, "norm.mean")?.into_data();
        let std = take(&mut map, "norm.std")?.into_data();
        let params = ParamSet::from_map(map);
        let expected = init_params(&config, 0);
        for (k, t) in expected.iter() {
            match params.get(k) {
                Ok(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::format(dir.join("codec.ckpt"), format!("tensor {k} missing or misshapen"))),
            }
        }
        Ok(Codec {
            config,
            params,
            norm: LatentNorm { mean, std },
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecLogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Reconstruction loss of one batch; returns the scalar loss node.
fn batch_loss(tape: &mut Tape, p: &Bound, cfg: &CodecConfig, x: Tensor, prng: &mut Prng) -> Result<Var> {
    let xv = tape.constant(x);
    let enc = encode_graph(tape, p, cfg, xv)?;
    let (z, kl) = if cfg.kl_weight > 0.0 {
        let d = cfg.latent;
        let mu = tape.slice(enc, 3, 0, d)?;
        let logvar = tape.slice(enc, 3, d, d)?;
        let logvar = tape.clamp(logvar, -10.0, 10.0);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = Tensor::randn(tape.shape(mu), 1.0, prng);
        let noise = tape.constant(noise);
        let jitter = tape.mul(sigma, noise)?;
        let z = tape.add(mu, jitter)?;
        // KL(N(mu, sigma²) || N(0, 1)) per element, averaged.
        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, logvar)?;
        let b = tape.add_scalar(b, -1.0);
        let kl = tape.mean(b);
        (z, Some(tape.scale(kl, 0.5 * cfg.kl_weight)))
    } else {
        (enc, None)
    };
    let y = decode_graph(tape, p, cfg, z)?;
    let diff = tape.sub(y, xv)?;
    let sq = tape.square(diff);
    let mut loss = tape.mean(sq);
    if let Some(kl) = kl {
        loss = tape.add(loss, kl)?;
    }
    Ok(loss)
}

/// Trains on a 1:1 mix of scene images and mask renderings, then
/// calibrates the latent normalization. `log` receives JSON lines.
pub fn train_codec(
    samples: &[Sample],
    config: &CodecConfig,
    steps: usize,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Codec> {
    let mut codec = Codec::new(config.clone(), seed)?;
    if samples.is_empty() {
        return Err(Error::Config("codec training needs at least one sample".into()));
    }
    let size = samples[0].size;
    codec.check_size(size, size)?;
    let images: Vec<Vec<f32>> = samples.iter().map(|s| to_model_space(&s.image)).collect();
    let masks: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| to_model_space(&mask_to_rgb(&s.mask)))
        .collect();
    let mut adam = AdamState::new(config.lr_max);
    let shape = [size, size, 3];
    for step in 0..steps {
        let mut prng = Prng::new(seed, stream_id(&[0xc0dec, 1, step as u64]));
        let batch: Vec<&[f32]> = (0..config.batch)
            .map(|i| {
                let j = prng.below(samples.len());
                if i % 2 == 0 {
                    images[j].as_slice()
                } else {
                    masks[j].as_slice()
                }
            })
            .collect();
        let x = stack(&batch, &shape);
        let mut tape = Tape::new();
        let p = codec.params.bind(&mut tape, true);
        let loss = batch_loss(&mut tape, &p, config, x, &mut prng)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                fingerprint: stream_id(&[seed, step as u64]),
            });
        }
        let grads = tape.backward(loss)?;
        let grads = p.gradients(&grads);
        adam.lr = cosine_lr(step, steps, config.lr_max, config.lr_min)?;
        adam_step(&mut codec.params, &grads, &mut adam)?;
        if let Some(out) = log.as_deref_mut() {
            let line = CodecLogLine {
                step,
                loss: value,
                lr: adam.lr,
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("log line serializes"))
                .map_err(|e| Error::io("<log>", e))?;
        }
    }
    let n = config.calibration.min(2 * samples.len()).max(1);
    let calib: Vec<&[f32]> = (0..n)
        .map(|i| {
            let j = (i / 2) % samples.len();
            if i % 2 == 0 {
                images[j].as_slice()
            } else {
                masks[j].as_slice()
            }
        })
        .collect();
    codec.calibrate(&stack(&calib, &shape))?;
    Ok(codec)
}

/// Peak signal-to-noise ratio in byte units for model-space images.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 127.5;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    10.0 * (255.0f64 * 255.0 / mse.max(1e-12)).log10()
}
