//! Miniature diffusion transformer over latent tokens.
//!
//! Tokens are grouped by role: `[B, R, hw, D]` with role 0 the noisy latent
//! and role 1 (segmentation only) the clean image latent at timestep 0. Each
//! role gets its own adaptive-norm modulation; attention runs over all
//! `R·hw` tokens.

use std::fs;
use std::path::Path;

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{checkpoint, par, Bound, Element, ParamSet, Prng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{NULL, PAD, SEG, VOCAB};
use crate::flow::{Task, VelocityModel};
use crate::nn::{init_linear, init_zero_linear, linear};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub vocab: usize,
    pub cond_dim: usize,
    pub max_cond: usize,
    pub freqs: usize,
    /// Append the clean image latent as extra tokens for segmentation.
    pub shortcut: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            grid_h: 8,
            grid_w: 8,
            channels: 16,
            vocab: VOCAB,
            cond_dim: 64,
            max_cond: 8,
            freqs: 64,
            shortcut: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 || self.freqs == 0 {
            return Err(Error::Config("model grid, channels and freqs must be positive".into()));
        }
        if self.vocab <= NULL || self.max_cond == 0 || self.cond_dim == 0 {
            return Err(Error::Config(format!("vocab must exceed {NULL} and cond sizes be positive")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// `[h, w, d]` latent to `[h·w, d]` tokens in row-major order.
pub fn patchify(latent: &Tensor) -> Result<Tensor> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::domain("patchify", format!("expected [h, w, d], got {s:?}")));
    }
    Ok(latent.reshape(&[s[0] * s[1], s[2]])?)
}

pub fn unpatchify(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::domain("unpatchify", format!("{s:?} tokens for a {h}x{w} grid")));
    }
    Ok(tokens.reshape(&[h, w, s[1]])?)
}

/// 2-D sine-cosine table, `[h·w, dim]`.
fn sincos_2d(h: usize, w: usize, dim: usize) -> Vec<f32> {
    let quarter = (dim / 4).max(1);
    let mut out = vec![0f32; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (axis, pos) in [(0, y as f64), (1, x as f64)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    let base = axis * 2 * quarter;
                    if base + 2 * k + 1 < dim {
                        row[base + 2 * k] = (pos * omega).sin() as f32;
                        row[base + 2 * k + 1] = (pos * omega).cos() as f32;
                    }
                }
            }
        }
    }
    out
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut prng = Prng::new(seed, stream_id(&[0xd17]));
    let mut p = ParamSet::new();
    let (d, c, cd) = (cfg.dim, cfg.channels, cfg.cond_dim);
    let hidden = cfg.mlp_ratio * d;
    init_linear(&mut p, "embed", c, d, &mut prng);
    let hw = cfg.tokens();
    let table = sincos_2d(cfg.grid_h, cfg.grid_w, d);
    let mut pos = table.clone();
    pos.extend_from_slice(&table);
    let jitter = Tensor::<f32>::randn(&[2 * hw, d], 0.02, &mut prng);
    pos.iter_mut().zip(jitter.data()).for_each(|(p, j)| *p += j);
    p.insert("pos", Tensor::new(&[2 * hw, d], pos).unwrap());
    init_linear(&mut p, "time.l1", 2 * cfg.freqs, d, &mut prng);
    init_linear(&mut p, "time.l2", d, d, &mut prng);
    p.insert("cond.table", Tensor::randn(&[cfg.vocab, cd], 0.5, &mut prng));
    p.insert("cond.pos", Tensor::randn(&[cfg.max_cond, cd], 0.1, &mut prng));
    for i in 0..cfg.depth {
        let b = format!("blk{i}");
        init_zero_linear(&mut p, &format!("{b}.ada"), d, 6 * d);
        init_linear(&mut p, &format!("{b}.qkv"), d, 3 * d, &mut prng);
        init_linear(&mut p, &format!("{b}.proj"), d, d, &mut prng);
        init_linear(&mut p, &format!("{b}.xq"), d, d, &mut prng);
        init_linear(&mut p, &format!("{b}.xkv"), cd, 2 * d, &mut prng);
        init_zero_linear(&mut p, &format!("{b}.xo"), d, d);
        init_linear(&mut p, &format!("{b}.fc1"), d, hidden, &mut prng);
        init_linear(&mut p, &format!("{b}.fc2"), hidden, d, &mut prng);
    }
    init_zero_linear(&mut p, "final.ada", d, 2 * d);
    init_zero_linear(&mut p, "final.out", d, c);
    p
}

/// Sinusoidal features of `1000·t`, `[n, 2·freqs]`.
pub fn time_features<T: Element>(t: &[f64], freqs: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.len() * 2 * freqs);
    for &ti in t {
        let x = 1000.0 * ti;
        for k in 0..freqs {
            data.push(T::of((x * (-(10000f64.ln()) * k as f64 / freqs as f64).exp()).cos()));
        }
        for k in 0..freqs {
            data.push(T::of((x * (-(10000f64.ln()) * k as f64 / freqs as f64).exp()).sin()));
        }
    }
    Tensor::new(&[t.len(), 2 * freqs], data).unwrap()
}

/// Time embedding MLP on the tape, `[n, D]`.
pub fn time_embed<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, t: &[f64]) -> Result<Var> {
    let f = tape.constant(time_features(t, cfg.freqs));
    let h = linear(tape, p, "time.l1", f)?;
    let h = tape.silu(h);
    linear(tape, p, "time.l2", h)
}

/// Embedded condition tokens `[B, C, cond_dim]` and the additive key mask
/// `[B, 1, 1, C]`; shorter sequences are padded.
pub fn embed_condition<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    cond: &[Vec<usize>],
) -> Result<(Var, Var)> {
    let b = cond.len();
    let len = cond.iter().map(Vec::len).max().unwrap_or(0).max(1);
    if len > cfg.max_cond {
        return Err(Error::domain(
            "embed_condition",
            format!("{len} condition tokens exceed capacity {}", cfg.max_cond),
        ));
    }
    if let Some(&bad) = cond.iter().flatten().find(|&&id| id >= cfg.vocab) {
        return Err(Error::domain("embed_condition", format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    let mut ids = Vec::with_capacity(b * len);
    let mut mask = Vec::with_capacity(b * len);
    for c in cond {
        // An empty sequence means the null condition.
        let c: &[usize] = if c.is_empty() { &[NULL] } else { c };
        for j in 0..len {
            ids.push(c.get(j).copied().unwrap_or(PAD));
            mask.push(if j < c.len() { T::zero() } else { T::of(-1e9) });
        }
    }
    let table = p.get("cond.table")?;
    let e = tape.index_select(table, &ids)?;
    let e = tape.reshape(e, &[b, len, cfg.cond_dim])?;
    let pos = p.get("cond.pos")?;
    let pos = tape.slice(pos, 0, 0, len)?;
    let e = tape.add(e, pos)?;
    let m = tape.constant(Tensor::new(&[b, 1, 1, len], mask)?);
    Ok((e, m))
}

fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(tape.permute(y, &[0, 2, 1, 3])?)
}

fn merge_heads<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(y, &[s[0], s[2], s[1] * s[3]])?)
}

/// Scaled dot-product attention; inputs `[B, L, D]`, output `[B, Lq, D]`.
fn attention<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let dh = tape.shape(q)[2] / heads;
    let (q, k, v) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let s = tape.matmul_bt(q, k)?;
    let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        s = tape.add(s, m)?;
    }
    let a = tape.softmax(s);
    let o = tape.matmul(a, v)?;
    merge_heads(tape, o)
}

/// `LN(x)·(1 + scale) + shift` with modulation broadcast over tokens.
fn modulate<T: Element>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, 1e-6);
    let s = tape.add_scalar(scale, 1.0);
    let h = tape.mul(h, s)?;
    Ok(tape.add(h, shift)?)
}

fn chunk<T: Element>(tape: &mut Tape<T>, x: Var, i: usize, d: usize) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    Ok(tape.slice(x, axis, i * d, d)?)
}

/// Velocity for `x_t` `[B, h, w, c]` at per-sample `t`. `clean` must be
/// present exactly for shortcut segmentation.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    task: Task,
    x_t: Var,
    t: &[f64],
    cond: &[Vec<usize>],
    clean: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(x_t).to_vec();
    let (gh, gw, c, d) = (cfg.grid_h, cfg.grid_w, cfg.channels, cfg.dim);
    if s.len() != 4 || s[1..] != [gh, gw, c] || t.len() != s[0] || cond.len() != s[0] {
        return Err(Error::domain(
            "dit_forward",
            format!(
                "latent {s:?} with {} timesteps and {} conditions; model grid is {gh}x{gw}x{c}",
                t.len(),
                cond.len()
            ),
        ));
    }
    let wants_clean = task == Task::Segmentation && cfg.shortcut;
    match (wants_clean, clean.is_some()) {
        (true, false) => return Err(Error::domain("dit_forward", "segmentation call is missing the clean latent")),
        (false, true) => return Err(Error::domain("dit_forward", "clean latent given where none is used")),
        _ => {}
    }
    if let Some(cv) = clean {
        if tape.shape(cv) != s.as_slice() {
            return Err(Error::domain(
                "dit_forward",
                format!("clean latent {:?} vs noisy {s:?}", tape.shape(cv)),
            ));
        }
    }
    let b = s[0];
    let hw = gh * gw;
    let roles = if clean.is_some() { 2 } else { 1 };

    let pos = p.get("pos")?;
    let mut streams = Vec::with_capacity(roles);
    for (r, src) in std::iter::once(x_t).chain(clean).enumerate() {
        let x = tape.reshape(src, &[b, hw, c])?;
        let x = linear(tape, p, "embed", x)?;
        let rows = tape.slice(pos, 0, r * hw, hw)?;
        let x = tape.add(x, rows)?;
        streams.push(tape.reshape(x, &[b, 1, hw, d])?);
    }
    let mut x = if roles == 1 { streams[0] } else { tape.concat(&streams, 1)? };

    let times: Vec<f64> = t
        .iter()
        .flat_map(|&ti| std::iter::once(ti).chain((roles == 2).then_some(0.0)))
        .collect();
    let temb = time_embed(tape, p, cfg, &times)?;
    let temb = tape.reshape(temb, &[b, roles, 1, d])?;
    let act = tape.silu(temb);
    let (cemb, cmask) = embed_condition(tape, p, cfg, cond)?;
    let seq = roles * hw;

    for i in 0..cfg.depth {
        let blk = format!("blk{i}");
        let ada = linear(tape, p, &format!("{blk}.ada"), act)?;
        let m: Vec<Var> = (0..6).map(|k| chunk(tape, ada, k, d)).collect::<Result<_>>()?;

        let h = modulate(tape, x, m[0], m[1])?;
        let h = tape.reshape(h, &[b, seq, d])?;
        let qkv = linear(tape, p, &format!("{blk}.qkv"), h)?;
        let (q, k, v) = (chunk(tape, qkv, 0, d)?, chunk(tape, qkv, 1, d)?, chunk(tape, qkv, 2, d)?);
        let a = attention(tape, q, k, v, cfg.heads, None)?;
        let a = linear(tape, p, &format!("{blk}.proj"), a)?;
        let a = tape.reshape(a, &[b, roles, hw, d])?;
        let a = tape.mul(a, m[2])?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, 1e-6);
        let h = tape.reshape(h, &[b, seq, d])?;
        let q = linear(tape, p, &format!("{blk}.xq"), h)?;
        let kv = linear(tape, p, &format!("{blk}.xkv"), cemb)?;
        let (k, v) = (chunk(tape, kv, 0, d)?, chunk(tape, kv, 1, d)?);
        let a = attention(tape, q, k, v, cfg.heads, Some(cmask))?;
        let a = linear(tape, p, &format!("{blk}.xo"), a)?;
        let a = tape.reshape(a, &[b, roles, hw, d])?;
        x = tape.add(x, a)?;

        let h = modulate(tape, x, m[3], m[4])?;
        let h = linear(tape, p, &format!("{blk}.fc1"), h)?;
        let h = tape.silu(h);
        let h = linear(tape, p, &format!("{blk}.fc2"), h)?;
        let h = tape.mul(h, m[5])?;
        x = tape.add(x, h)?;
    }

    let ada = linear(tape, p, "final.ada", act)?;
    let ada = tape.slice(ada, 1, 0, 1)?;
    let (shift, scale) = (chunk(tape, ada, 0, d)?, chunk(tape, ada, 1, d)?);
    let noisy = tape.slice(x, 1, 0, 1)?;
    let h = modulate(tape, noisy, shift, scale)?;
    let out = linear(tape, p, "final.out", h)?;
    Ok(tape.reshape(out, &[b, gh, gw, c])?)
}

/// Condition tokens starting with `[SEG]` mark segmentation calls.
pub fn task_of(cond: &[usize]) -> Task {
    if cond.first() == Some(&SEG) {
        Task::Segmentation
    } else {
        Task::Generation
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub config: ModelConfig,
    pub params: ParamSet,
}

const CHUNK: usize = 16;

impl Dit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Dit { config, params })
    }

    fn run_chunk(&self, x: Tensor, t: f32, cond: &[Vec<usize>], clean: Option<Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let task = task_of(&cond[0]);
        let xv = tape.constant(x);
        let clean = match (task, self.config.shortcut) {
            (Task::Segmentation, true) => Some(tape.constant(
                clean.ok_or_else(|| Error::domain("segment", "segmentation needs the image latent"))?,
            )),
            _ => None,
        };
        let ts = vec![t as f64; cond.len()];
        let y = forward(&mut tape, &p, &self.config, task, xv, &ts, cond, clean)?;
        Ok(tape.value(y).clone())
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join(format!("{name}.ckpt")), self.params.as_map())?;
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        checkpoint::write_atomic(&dir.join(format!("{name}.json")), (text + "\n").as_bytes())?;
        Ok(())
    }
}

fn rows(t: &Tensor, lo: usize, n: usize) -> Result<Tensor> {
    Ok(t.narrow(0, lo, n)?)
}

impl VelocityModel for Dit {
    fn velocity(&self, x: &Tensor, t: f32, cond: &[Vec<usize>], clean: Option<&Tensor>) -> Result<Tensor> {
        let b = x.shape()[0];
        if cond.len() != b {
            return Err(Error::domain("velocity", format!("{} conditions for batch {b}", cond.len())));
        }
        if let Some(first) = cond.first() {
            let task = task_of(first);
            if cond.iter().any(|c| task_of(c) != task) {
                return Err(Error::domain("velocity", "batch mixes segmentation and generation"));
            }
        }
        let chunks = b.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |ci| -> Result<Tensor> {
            let lo = ci * CHUNK;
            let n = CHUNK.min(b - lo);
            let xc = rows(x, lo, n)?;
            let cc = clean.map(|c| rows(c, lo, n)).transpose()?;
            self.run_chunk(xc, t, &cond[lo..lo + n], cc)
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }
}
