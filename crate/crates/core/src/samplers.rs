//! Timestep distributions for the two tasks.
//!
//! `t = 0` is clean data and `t = 1` is pure noise. Generation draws from a
//! standard logit-normal. Segmentation draws `s = 1 − t` from the shifted
//! density `2a²s / (s² + a²)²`, truncated to `s ≤ 1`, which piles the mass
//! next to the pure-noise end.

use std::io::Write;
use std::path::Path;

use maskflow_tensor::Prng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

pub fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenSampler;

impl GenSampler {
    pub fn sample(&self, prng: &mut Prng) -> f64 {
        logistic(prng.normal())
    }
}

fn open_unit(op: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("t = {t} outside (0, 1)")))
    }
}

fn closed_unit(op: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(op, format!("t = {t} outside [0, 1]")))
    }
}

pub fn pdf_gen(t: f64) -> Result<f64> {
    open_unit("pdf_gen", t)?;
    let l = logit(t);
    Ok((-0.5 * l * l).exp() / (SQRT_2PI * t * (1.0 - t)))
}

pub fn cdf_gen(t: f64) -> Result<f64> {
    open_unit("cdf_gen", t)?;
    Ok(phi(logit(t)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSampler {
    a: f64,
}

impl SegSampler {
    pub const DEFAULT_A: f64 = 0.05;

    pub fn new(a: f64) -> Result<Self> {
        if a > 0.0 && a.is_finite() {
            Ok(SegSampler { a })
        } else {
            Err(Error::domain("seg_sampler", format!("shift a = {a} must be positive")))
        }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Inverse transform of one uniform; `None` when the draw lands past `s = 1`.
    pub fn from_uniform(&self, u: f64) -> Option<f64> {
        let s = self.a * (u / (1.0 - u)).sqrt();
        (s <= 1.0).then_some(1.0 - s)
    }

    pub fn sample(&self, prng: &mut Prng) -> f64 {
        loop {
            if let Some(t) = self.from_uniform(prng.uniform()) {
                return t;
            }
        }
    }

    fn mass(&self) -> f64 {
        1.0 / (1.0 + self.a * self.a)
    }

    /// Density at `t`; `truncated` renormalizes over `[0, 1]`.
    pub fn pdf(&self, t: f64, truncated: bool) -> Result<f64> {
        closed_unit("pdf_seg", t)?;
        let (s, a2) = (1.0 - t, self.a * self.a);
        let p = 2.0 * a2 * s / (s * s + a2).powi(2);
        Ok(if truncated { p / self.mass() } else { p })
    }

    pub fn cdf(&self, t: f64, truncated: bool) -> Result<f64> {
        closed_unit("cdf_seg", t)?;
        let (s, a2) = (1.0 - t, self.a * self.a);
        let tail = s * s / (s * s + a2);
        Ok(if truncated { 1.0 - tail / self.mass() } else { 1.0 - tail })
    }

    pub fn mode(&self) -> f64 {
        1.0 - self.a / 3f64.sqrt()
    }
}

/// Kolmogorov–Smirnov distance between samples and a CDF. Sorts in place.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Curve {
    Gen,
    Seg(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityRow {
    pub kind: &'static str,
    pub a: Option<f64>,
    pub t: f64,
    pub pdf: f64,
    pub cdf: f64,
}

/// `n` evenly spaced points on `[0, 1]`, endpoints included.
pub fn unit_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::domain("density_table", format!("grid needs at least 2 points, got {n}")));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// Density and CDF of each curve on `grid`. Segmentation curves use the
/// truncated density; the generation endpoints take their limits.
pub fn density_table(curves: &[Curve], grid: &[f64]) -> Result<Vec<DensityRow>> {
    if grid.is_empty() {
        return Err(Error::domain("density_table", "empty grid"));
    }
    let mut rows = Vec::with_capacity(curves.len() * grid.len());
    for &c in curves {
        for &t in grid {
            closed_unit("density_table", t)?;
            let row = match c {
                Curve::Gen => {
                    let (pdf, cdf) = if t <= 0.0 {
                        (0.0, 0.0)
                    } else if t >= 1.0 {
                        (0.0, 1.0)
                    } else {
                        (pdf_gen(t)?, cdf_gen(t)?)
                    };
                    DensityRow {
                        kind: "gen",
                        a: None,
                        t,
                        pdf,
                        cdf,
                    }
                }
                Curve::Seg(a) => {
                    let s = SegSampler::new(a)?;
                    DensityRow {
                        kind: "seg",
                        a: Some(a),
                        t,
                        pdf: s.pdf(t, true)?,
                        cdf: s.cdf(t, true)?,
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_density_csv(rows: &[DensityRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "kind,a,t,pdf,cdf")?;
    for r in rows {
        let a = r.a.map(|a| format!("{a}")).unwrap_or_default();
        writeln!(out, "{},{},{:.6},{:.9},{:.12}", r.kind, a, r.t, r.pdf, r.cdf)?;
    }
    Ok(())
}

pub fn save_density_csv(rows: &[DensityRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_density_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Trapezoid integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}
