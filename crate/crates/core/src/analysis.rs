//! Linear structure of mask latents: one-component PCA and ridge probes
//! under flow-path noise.

use std::io::Write;
use std::path::Path;

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{par, Prng, Tensor};
use serde::Serialize;

use crate::{Error, Result};

/// Latent cells as rows with per-cell mask labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisMatrix {
    pub x: Vec<f64>,
    pub labels: Vec<u8>,
    pub d: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl AnalysisMatrix {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Stacks `[N, h, w, d]` latents with labels pooled from `size × size`
    /// masks by majority over each `f × f` block (ties count as foreground).
    pub fn from_latents(latents: &Tensor, masks: &[&[u8]], size: usize) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 4 || s[0] != masks.len() {
            return Err(Error::domain(
                "analysis_matrix",
                format!("latents {s:?} vs {} masks", masks.len()),
            ));
        }
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        if size % h != 0 || size / h != size / w.max(1) {
            return Err(Error::domain("analysis_matrix", format!("mask size {size} vs grid {h}x{w}")));
        }
        let labels = masks
            .iter()
            .flat_map(|m| downsample_mask(m, size, size / h))
            .collect();
        Ok(AnalysisMatrix {
            x: latents.data().iter().map(|&v| v as f64).collect(),
            labels,
            d,
            n,
            h,
            w,
        })
    }

    pub fn with_features(&self, x: Vec<f64>) -> Self {
        AnalysisMatrix { x, ..self.clone() }
    }

    /// Keeps every foreground row and an equal-size seeded subset of the
    /// background rows (or vice versa), in original order.
    pub fn balanced(&self, seed: u64) -> Self {
        let fg: Vec<usize> = (0..self.rows()).filter(|&i| self.labels[i] == 1).collect();
        let bg: Vec<usize> = (0..self.rows()).filter(|&i| self.labels[i] == 0).collect();
        let (keep_all, mut pool) = if fg.len() <= bg.len() { (fg, bg) } else { (bg, fg) };
        let mut prng = Prng::new(seed, stream_id(&[0xba1a]));
        prng.shuffle(&mut pool);
        pool.truncate(keep_all.len());
        let mut idx: Vec<usize> = keep_all.into_iter().chain(pool).collect();
        idx.sort_unstable();
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in &idx {
            x.extend_from_slice(self.row(i));
        }
        AnalysisMatrix {
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

/// Majority label per `f × f` block; ties go to foreground.
pub fn downsample_mask(mask: &[u8], size: usize, f: usize) -> Vec<u8> {
    let g = size / f;
    let mut out = Vec::with_capacity(g * g);
    for by in 0..g {
        for bx in 0..g {
            let mut fg = 0;
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    fg += (mask[y * size + x] != 0) as usize;
                }
            }
            out.push((2 * fg >= f * f) as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaDirection {
    pub w: Vec<f64>,
    pub explained: f64,
    pub iterations: usize,
}

fn covariance(x: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = vec![0.0; d * d];
    for r in x.chunks_exact(d) {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += a * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (rows as f64 - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    n
}

/// Top principal direction by power iteration, plus the centered scores.
pub fn pca_one_component(m: &AnalysisMatrix) -> Result<(PcaDirection, Vec<f64>)> {
    let (rows, d) = (m.rows(), m.d);
    if m.n < 2 || rows < 2 {
        return Err(Error::domain("pca", format!("need N >= 2, got {}", m.n)));
    }
    let (mean, cov) = covariance(&m.x, rows, d);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 || !trace.is_finite() {
        return Err(Error::domain("pca", "data has zero variance"));
    }
    // Start from the highest-variance axis, tilted so it is never orthogonal
    // to a top eigenvector lying in the span of other axes.
    let top = (0..d)
        .max_by(|&a, &b| cov[a * d + a].total_cmp(&cov[b * d + b]).then(b.cmp(&a)))
        .unwrap();
    let mut w: Vec<f64> = (0..d).map(|i| if i == top { 1.0 } else { 0.1 }).collect();
    normalize(&mut w);
    let mut lambda = dot(&w, &matvec(&cov, &w));
    let mut iterations = 0;
    for it in 1..=10_000 {
        let mut next = matvec(&cov, &w);
        if normalize(&mut next) == 0.0 {
            break;
        }
        let l = dot(&next, &matvec(&cov, &next));
        w = next;
        iterations = it;
        let done = (l - lambda).abs() <= 1e-8 * l.abs();
        lambda = l;
        if done {
            break;
        }
    }
    let mut scores: Vec<f64> = m
        .x
        .chunks_exact(d)
        .map(|r| r.iter().zip(&mean).zip(&w).map(|((x, mu), wi)| (x - mu) * wi).sum())
        .collect();
    // Orient so scores correlate non-negatively with the labels.
    let mean_label = m.labels.iter().map(|&l| l as f64).sum::<f64>() / rows as f64;
    let corr: f64 = scores
        .iter()
        .zip(&m.labels)
        .map(|(s, &l)| s * (l as f64 - mean_label))
        .sum();
    if corr < 0.0 {
        w.iter_mut().for_each(|x| *x = -*x);
        scores.iter_mut().for_each(|s| *s = -*s);
    }
    Ok((
        PcaDirection {
            w,
            explained: lambda / trace,
            iterations,
        },
        scores,
    ))
}

/// Otsu threshold over a 256-bin histogram of `values`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

/// Fraction of cells where `score > threshold` agrees with the label.
pub fn agreement(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == (l == 1))
        .count();
    hits as f64 / labels.len() as f64
}

/// `t·ε + (1 − t)·latent`.
pub fn noise_perturb(latent: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain("noise_perturb", format!("t = {t} outside [0, 1]")));
    }
    let t = t as f32;
    Ok(latent.zip_with(eps, "noise_perturb", |x, e| t * e + (1.0 - t) * x)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
}

impl LinearProbe {
    pub fn decision(&self, row: &[f64]) -> f64 {
        dot(&self.w, row) + self.b
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        (self.decision(row) > 0.0) as u8
    }

    pub fn accuracy(&self, m: &AnalysisMatrix) -> f64 {
        let hits = (0..m.rows())
            .filter(|&i| self.predict(m.row(i)) == m.labels[i])
            .count();
        hits as f64 / m.rows() as f64
    }
}

/// In-place Cholesky solve of the SPD system `a x = b`.
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if s <= 0.0 || !s.is_finite() {
            return None;
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / l;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Some(b)
}

/// Ridge least squares on `±1` targets. The normal equations are averaged
/// over rows and the bias is not penalized.
pub fn probe_fit(m: &AnalysisMatrix, lambda: f64) -> Result<LinearProbe> {
    if !(lambda > 0.0) {
        return Err(Error::domain("probe_fit", format!("ridge strength {lambda} must be positive")));
    }
    let rows = m.rows();
    let fg = m.labels.iter().filter(|&&l| l == 1).count();
    let min = (rows as f64 * 0.01).ceil() as usize;
    if rows == 0 || fg < min.max(1) || rows - fg < min.max(1) {
        return Err(Error::domain(
            "probe_fit",
            format!("class balance {fg}/{rows} below 1% per class"),
        ));
    }
    let n = m.d + 1;
    let mut ata = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    let mut aug = vec![1.0; n];
    for i in 0..rows {
        aug[..m.d].copy_from_slice(m.row(i));
        let y = if m.labels[i] == 1 { 1.0 } else { -1.0 };
        for r in 0..n {
            aty[r] += aug[r] * y;
            for c in r..n {
                ata[r * n + c] += aug[r] * aug[c];
            }
        }
    }
    for r in 0..n {
        aty[r] /= rows as f64;
        for c in r..n {
            let v = ata[r * n + c] / rows as f64;
            ata[r * n + c] = v;
            ata[c * n + r] = v;
        }
    }
    for r in 0..m.d {
        ata[r * n + r] += lambda;
    }
    let beta = cholesky_solve(ata, aty).ok_or_else(|| Error::domain("probe_fit", "normal matrix is singular"))?;
    Ok(LinearProbe {
        w: beta[..m.d].to_vec(),
        b: beta[m.d],
        lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub seed: u64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct SweepInput<'a> {
    pub train: &'a Tensor,
    pub train_masks: &'a [&'a [u8]],
    pub val: &'a Tensor,
    pub val_masks: &'a [&'a [u8]],
    pub size: usize,
    pub lambda: f64,
    /// Subsample cells to equal class counts before fitting and scoring.
    pub balance: bool,
}

/// Probe accuracy of noisy latents on a `t` grid, one fit per `(t, seed)`.
pub fn separability_sweep(input: &SweepInput, t_grid: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if let Some(&t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::domain("separability_sweep", format!("t = {t} outside [0, 1]")));
    }
    let train = AnalysisMatrix::from_latents(input.train, input.train_masks, input.size)?;
    let val = AnalysisMatrix::from_latents(input.val, input.val_masks, input.size)?;
    let jobs: Vec<(usize, u64)> = (0..t_grid.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let rows = par::map_range(jobs.len(), |j| -> Result<SweepRow> {
        let (ti, seed) = jobs[j];
        let t = t_grid[ti];
        let noisy = |m: &AnalysisMatrix, split: u64| {
            let mut prng = Prng::new(seed, stream_id(&[0x5eeb, split, ti as u64]));
            let x = m
                .x
                .iter()
                .map(|&v| t * prng.normal() + (1.0 - t) * v)
                .collect();
            let m = m.with_features(x);
            if input.balance {
                m.balanced(stream_id(&[seed, split]))
            } else {
                m
            }
        };
        let (tr, va) = (noisy(&train, 0), noisy(&val, 1));
        let probe = probe_fit(&tr, input.lambda)?;
        Ok(SweepRow {
            t,
            seed,
            train_acc: probe.accuracy(&tr),
            val_acc: probe.accuracy(&va),
        })
    });
    rows.into_iter().collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "t,seed,train_acc,val_acc")?;
    for r in rows {
        writeln!(out, "{:.4},{},{:.6},{:.6}", r.t, r.seed, r.train_acc, r.val_acc)?;
    }
    Ok(())
}

pub fn save_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Mean validation accuracy per grid point, in grid order.
pub fn mean_val_by_t(rows: &[SweepRow], t_grid: &[f64]) -> Vec<f64> {
    t_grid
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.val_acc).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}
