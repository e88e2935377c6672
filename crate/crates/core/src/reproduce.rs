//! Figure and table artifacts from finished stages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::{evaluate_saved, save_results_csv, ArmResult};
use crate::analysis::{
    agreement, mean_val_by_t, otsu_threshold, pca_one_component, separability_sweep, AnalysisMatrix, SweepInput,
    SweepRow,
};
use crate::codec::Codec;
use crate::data::{load_split, write_gray_png, Manifest, Sample, Split};
use crate::samplers::{density_table, save_density_csv, unit_grid, Curve};
use crate::train::LatentCorpus;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// Training records used to fit probes.
    pub probe_train: usize,
    pub lambda: f64,
    pub t_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub balance: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            probe_train: 300,
            lambda: 1e-3,
            t_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seeds: vec![0, 1, 2],
            balance: true,
        }
    }
}

/// Probe sweep plus one-component PCA of validation mask latents.
#[derive(Clone, Debug)]
pub struct LatentStudy {
    pub sweep: Vec<SweepRow>,
    pub mean_val: Vec<f64>,
    pub pca_scores: Vec<f64>,
    pub pca_explained: f64,
    pub threshold: f64,
    pub agreement: f64,
    pub labels: Vec<u8>,
    pub grid: (usize, usize),
}

pub fn latent_study(codec: &Codec, train: &[Sample], val: &[Sample], cfg: &StudyConfig) -> Result<LatentStudy> {
    let train = &train[..cfg.probe_train.min(train.len())];
    if train.is_empty() || val.len() < 2 {
        return Err(Error::Config("latent study needs training records and at least two validation records".into()));
    }
    let size = val[0].size;
    let (_, train_lat) = codec.encode_samples(train)?;
    let (_, val_lat) = codec.encode_samples(val)?;
    let train_masks: Vec<&[u8]> = train.iter().map(|s| s.mask.as_slice()).collect();
    let val_masks: Vec<&[u8]> = val.iter().map(|s| s.mask.as_slice()).collect();
    let input = SweepInput {
        train: &train_lat,
        train_masks: &train_masks,
        val: &val_lat,
        val_masks: &val_masks,
        size,
        lambda: cfg.lambda,
        balance: cfg.balance,
    };
    let sweep = separability_sweep(&input, &cfg.t_grid, &cfg.seeds)?;
    let mean_val = mean_val_by_t(&sweep, &cfg.t_grid);
    let m = AnalysisMatrix::from_latents(&val_lat, &val_masks, size)?;
    let (dir, scores) = pca_one_component(&m)?;
    let threshold = otsu_threshold(&scores);
    Ok(LatentStudy {
        agreement: agreement(&scores, &m.labels, threshold),
        sweep,
        mean_val,
        pca_scores: scores,
        pca_explained: dir.explained,
        threshold,
        labels: m.labels,
        grid: (m.h, m.w),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub study: StudyConfig,
    /// Validation records rendered under `fig4/`.
    pub fig4_count: usize,
    pub density_points: usize,
    pub seg_a: Vec<f64>,
    pub eps_seed: u64,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig {
            study: StudyConfig::default(),
            fig4_count: 6,
            density_points: 1001,
            seg_a: vec![0.05, 0.1, 0.5],
            eps_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReproduceManifest {
    pub config: ReproduceConfig,
    pub data_seed: u64,
    pub data_train: usize,
    pub data_val: usize,
    pub codec: crate::codec::CodecConfig,
    pub pca_explained: f64,
    pub pca_threshold: f64,
    pub pca_agreement: f64,
    pub probe_mean_val: Vec<(f64, f64)>,
    pub arms: Vec<ArmResult>,
    pub files: Vec<String>,
}

fn upscale(cells: &[u8], h: usize, w: usize, f: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w * f * f);
    for y in 0..h * f {
        for x in 0..w * f {
            out.push(cells[(y / f) * w + x / f]);
        }
    }
    out
}

/// Writes `fig4/`, `fig5.csv`, `fig6.csv`, `tables.csv` and
/// `manifest.json` under `out`.
pub fn reproduce(
    data_dir: &Path,
    codec_dir: &Path,
    ablation_dir: &Path,
    out: &Path,
    cfg: &ReproduceConfig,
) -> Result<ReproduceManifest> {
    let manifest = Manifest::load(data_dir)?;
    let codec = Codec::load(codec_dir)?;
    if !ablation_dir.join(crate::ablation::ARMS_FILE).exists() {
        return Err(Error::Missing {
            path: ablation_dir.join(crate::ablation::ARMS_FILE),
            hint: "ablate",
        });
    }
    let train = load_split(data_dir, &manifest, Split::Train)?;
    let val = load_split(data_dir, &manifest, Split::Val)?;
    fs::create_dir_all(out.join("fig4")).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();

    let study = latent_study(&codec, &train, &val, &cfg.study)?;
    let (h, w) = study.grid;
    let f = manifest.config.size / h;
    let (lo, hi) = study
        .pca_scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let span = (hi - lo).max(1e-12);
    for i in 0..cfg.fig4_count.min(val.len()) {
        let cells = i * h * w..(i + 1) * h * w;
        let label: Vec<u8> = study.labels[cells.clone()].iter().map(|&l| l * 255).collect();
        let score: Vec<u8> = study.pca_scores[cells.clone()]
            .iter()
            .map(|&s| (255.0 * (s - lo) / span).round() as u8)
            .collect();
        let binary: Vec<u8> = study.pca_scores[cells]
            .iter()
            .map(|&s| if s > study.threshold { 255 } else { 0 })
            .collect();
        for (kind, px) in [("mask", &label), ("pca", &score), ("pca_otsu", &binary)] {
            let name = format!("fig4/{i:02}_{kind}.png");
            write_gray_png(&out.join(&name), &upscale(px, h, w, f), h * f)?;
            files.push(name);
        }
    }

    let mut curves = vec![Curve::Gen];
    curves.extend(cfg.seg_a.iter().map(|&a| Curve::Seg(a)));
    let rows = density_table(&curves, &unit_grid(cfg.density_points)?)?;
    save_density_csv(&rows, &out.join("fig5.csv"))?;
    files.push("fig5.csv".into());

    crate::analysis::save_sweep_csv(&study.sweep, &out.join("fig6.csv"))?;
    files.push("fig6.csv".into());

    let val_corpus = LatentCorpus::build(&codec, &val)?;
    let arms = evaluate_saved(ablation_dir, &codec, &val_corpus, cfg.eps_seed)?;
    save_results_csv(&arms, &out.join("tables.csv"))?;
    files.push("tables.csv".into());

    let report = ReproduceManifest {
        config: cfg.clone(),
        data_seed: manifest.seed,
        data_train: manifest.train.len(),
        data_val: manifest.val.len(),
        codec: codec.config.clone(),
        pca_explained: study.pca_explained,
        pca_threshold: study.threshold,
        pca_agreement: study.agreement,
        probe_mean_val: cfg.study.t_grid.iter().copied().zip(study.mean_val.iter().copied()).collect(),
        arms,
        files,
    };
    let text = serde_json::to_string_pretty(&report).expect("manifest serializes");
    fs::write(out.join("manifest.json"), text + "\n").map_err(|e| Error::io(out, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_repeats_cells() {
        let up = upscale(&[1, 2, 3, 4], 2, 2, 2);
        assert_eq!(up, [1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    #[test]
    fn missing_inputs_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = reproduce(dir.path(), dir.path(), dir.path(), &dir.path().join("o"), &ReproduceConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("gen-data"), "{err}");
    }
}
