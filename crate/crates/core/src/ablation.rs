//! One-factor-at-a-time ablation arms over a shared corpus.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::eval::{evaluate_segmentation, EvalReport};
use crate::flow::Supervision;
use crate::train::{train, LatentCorpus, TrainConfig, TrainState};
use crate::{Error, Result};

pub const ARMS_FILE: &str = "arms.json";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// Which factor differs from the base arm; `base` for the base itself.
    pub factor: String,
    pub value: String,
    pub config: TrainConfig,
}

fn arm(name: &str, factor: &str, value: String, config: TrainConfig) -> Arm {
    Arm {
        name: name.to_string(),
        factor: factor.to_string(),
        value,
        config,
    }
}

/// Base arm followed by every single-factor variant.
pub fn arms(base: &TrainConfig) -> Vec<Arm> {
    let mut out = vec![arm("base", "base", "-".into(), base.clone())];
    for a in [0.05, 0.1, 0.5] {
        if a != base.seg_a {
            let cfg = TrainConfig { seg_a: a, ..base.clone() };
            out.push(arm(&format!("a={a}"), "seg_a", a.to_string(), cfg));
        }
    }
    for sup in [Supervision::MseLatent, Supervision::BceDecoder, Supervision::BceLinear] {
        if sup != base.supervision {
            let cfg = TrainConfig { supervision: sup, ..base.clone() };
            out.push(arm(sup.name(), "supervision", sup.name().into(), cfg));
        }
    }
    if base.mix_gen > 0 {
        let cfg = TrainConfig { mix_seg: 1, mix_gen: 0, ..base.clone() };
        out.push(arm("mix_off", "mix", "1:0".into(), cfg));
    }
    let mut cfg = base.clone();
    cfg.model.shortcut = !base.model.shortcut;
    let (name, value) = if base.model.shortcut { ("shortcut_off", "off") } else { ("shortcut_on", "on") };
    out.push(arm(name, "shortcut", value.into(), cfg));
    out
}

/// Keeps the arms named in `names`, in suite order. The base is always kept.
pub fn select(arms: Vec<Arm>, names: &[&str]) -> Result<Vec<Arm>> {
    for n in names {
        if !arms.iter().any(|a| a.name == *n) {
            let known: Vec<_> = arms.iter().map(|a| a.name.as_str()).collect();
            return Err(Error::Config(format!("unknown arm {n:?}; known: {}", known.join(", "))));
        }
    }
    Ok(arms
        .into_iter()
        .filter(|a| a.name == "base" || names.contains(&a.name.as_str()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub factor: String,
    pub value: String,
    pub miou: f64,
    pub oiou: f64,
    pub delta_miou: f64,
    pub delta_oiou: f64,
    pub fingerprint: String,
}

fn with_deltas(arms: &[Arm], reports: &[EvalReport]) -> Vec<ArmResult> {
    let base = arms.iter().position(|a| a.name == "base").map(|i| &reports[i]);
    arms.iter()
        .zip(reports)
        .map(|(a, r)| ArmResult {
            name: a.name.clone(),
            factor: a.factor.clone(),
            value: a.value.clone(),
            miou: r.miou,
            oiou: r.oiou,
            delta_miou: base.map_or(0.0, |b| r.miou - b.miou),
            delta_oiou: base.map_or(0.0, |b| r.oiou - b.oiou),
            fingerprint: r.fingerprint.clone(),
        })
        .collect()
}

/// Trains and evaluates every arm. With `out`, each arm's final state goes
/// to `out/<name>/final` and the arm list to `out/arms.json`.
pub fn run_ablation(
    arms: &[Arm],
    corpus: &LatentCorpus,
    val: &LatentCorpus,
    codec: &Codec,
    eps_seed: u64,
    out: Option<&Path>,
    mut progress: Option<&mut dyn Write>,
) -> Result<Vec<ArmResult>> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = serde_json::to_string_pretty(arms).expect("arms serialize");
        maskflow_tensor::checkpoint::write_atomic(&dir.join(ARMS_FILE), (text + "\n").as_bytes())?;
    }
    let mut reports = Vec::with_capacity(arms.len());
    for a in arms {
        let arm_dir = out.map(|d| d.join(&a.name));
        let (state, _) = train(&a.config, corpus, codec, arm_dir.as_deref(), None)?;
        let report = evaluate_state(&state, codec, val, eps_seed)?;
        if let Some(w) = progress.as_deref_mut() {
            let _ = writeln!(w, "arm {} miou {:.4} oiou {:.4}", a.name, report.miou, report.oiou);
        }
        reports.push(report);
    }
    let results = with_deltas(arms, &reports);
    if let Some(dir) = out {
        save_results_csv(&results, &dir.join(RESULTS_FILE))?;
    }
    Ok(results)
}

pub fn evaluate_state(state: &TrainState, codec: &Codec, val: &LatentCorpus, eps_seed: u64) -> Result<EvalReport> {
    let model = state.model();
    let head = state.head();
    let readout = state.readout(codec, &head)?;
    evaluate_segmentation(&model, &readout, val, eps_seed, &state.config.fingerprint())
}

/// Re-evaluates the arms stored under `dir` by a previous [`run_ablation`].
pub fn evaluate_saved(dir: &Path, codec: &Codec, val: &LatentCorpus, eps_seed: u64) -> Result<Vec<ArmResult>> {
    let path = dir.join(ARMS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing { path: path.clone(), hint: "ablate" },
        _ => Error::io(&path, e),
    })?;
    let arms: Vec<Arm> = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut reports = Vec::with_capacity(arms.len());
    for a in &arms {
        let state = TrainState::load(&dir.join(&a.name).join("final"))?;
        reports.push(evaluate_state(&state, codec, val, eps_seed)?);
    }
    Ok(with_deltas(&arms, &reports))
}

pub fn write_results_csv(rows: &[ArmResult], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "arm,factor,value,miou,oiou,delta_miou,delta_oiou,fingerprint")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.name, r.factor, r.value, r.miou, r.oiou, r.delta_miou, r.delta_oiou, r.fingerprint
        )?;
    }
    Ok(())
}

pub fn save_results_csv(rows: &[ArmResult], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_results_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    maskflow_tensor::checkpoint::write_atomic(path, &buf)?;
    Ok(())
}

/// Trend checks over a finished suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trends {
    /// `miou(0.05) ≥ miou(0.1) ≥ miou(0.5)`.
    pub a_ordered: Option<bool>,
    /// `miou(0.05) − miou(0.5)`.
    pub a_gap: Option<f64>,
    /// `miou(shortcut on) − miou(shortcut off)`.
    pub shortcut_gap: Option<f64>,
    /// `miou(mix on) − miou(mix off)`.
    pub mix_gap: Option<f64>,
    /// Supervision arms by descending mIoU.
    pub supervision_rank: Vec<String>,
}

pub fn trends(rows: &[ArmResult], base: &TrainConfig) -> Trends {
    let base_row = rows.iter().find(|r| r.name == "base");
    let by_a = |a: f64| -> Option<f64> {
        if a == base.seg_a {
            base_row.map(|r| r.miou)
        } else {
            rows.iter().find(|r| r.factor == "seg_a" && r.value == a.to_string()).map(|r| r.miou)
        }
    };
    let (a05, a1, a5) = (by_a(0.05), by_a(0.1), by_a(0.5));
    let a_ordered = match (a05, a1, a5) {
        (Some(x), Some(y), Some(z)) => Some(x >= y && y >= z),
        _ => None,
    };
    let a_gap = a05.zip(a5).map(|(x, z)| x - z);
    let other = |factor: &str| rows.iter().find(|r| r.factor == factor).map(|r| r.miou);
    let shortcut_gap = base_row.zip(other("shortcut")).map(|(b, o)| {
        if base.model.shortcut {
            b.miou - o
        } else {
            o - b.miou
        }
    });
    let mix_gap = base_row.zip(other("mix")).map(|(b, o)| b.miou - o);
    let mut sup: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.factor == "supervision")
        .map(|r| (r.value.clone(), r.miou))
        .collect();
    if let Some(b) = base_row {
        if !sup.is_empty() {
            sup.push((base.supervision.name().to_string(), b.miou));
        }
    }
    sup.sort_by(|x, y| y.1.total_cmp(&x.1));
    Trends {
        a_ordered,
        a_gap,
        shortcut_gap,
        mix_gap,
        supervision_rank: sup.into_iter().map(|(n, _)| n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn differing_fields(a: &TrainConfig, b: &TrainConfig) -> usize {
        let a = serde_json::to_value(a).unwrap();
        let b = serde_json::to_value(b).unwrap();
        let mut n = 0;
        for (k, v) in a.as_object().unwrap() {
            if k == "model" {
                for (mk, mv) in v.as_object().unwrap() {
                    n += (b["model"][mk] != *mv) as usize;
                }
            } else if k == "mix_seg" {
                continue;
            } else {
                n += (b[k] != *v) as usize;
            }
        }
        n
    }

    #[test]
    fn every_arm_differs_in_one_factor() {
        let base = TrainConfig::default();
        let all = arms(&base);
        let names: Vec<_> = all.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["base", "a=0.1", "a=0.5", "bce_decoder", "bce_linear", "mix_off", "shortcut_off"]);
        for a in &all[1..] {
            assert_eq!(differing_fields(&base, &a.config), 1, "{}", a.name);
        }
    }

    #[test]
    fn select_keeps_base_and_rejects_unknown() {
        let all = arms(&TrainConfig::default());
        let s = select(all.clone(), &["a=0.5"]).unwrap();
        assert_eq!(s.len(), 2);
        assert!(select(all, &["nope"]).is_err());
    }

    fn row(name: &str, factor: &str, value: &str, miou: f64) -> ArmResult {
        ArmResult {
            name: name.into(),
            factor: factor.into(),
            value: value.into(),
            miou,
            oiou: miou,
            delta_miou: 0.0,
            delta_oiou: 0.0,
            fingerprint: String::new(),
        }
    }

    #[test]
    fn trend_summary() {
        let rows = vec![
            row("base", "base", "-", 0.8),
            row("a=0.1", "seg_a", "0.1", 0.75),
            row("a=0.5", "seg_a", "0.5", 0.6),
            row("shortcut_off", "shortcut", "off", 0.1),
            row("bce_linear", "supervision", "bce_linear", 0.7),
        ];
        let t = trends(&rows, &TrainConfig::default());
        assert_eq!(t.a_ordered, Some(true));
        assert!((t.a_gap.unwrap() - 0.2).abs() < 1e-12);
        assert!((t.shortcut_gap.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(t.mix_gap, None);
        assert_eq!(t.supervision_rank, ["mse_latent", "bce_linear"]);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![row("base", "base", "-", 0.5)];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "base,base,-,0.500000,0.500000,0.000000,0.000000,");
    }
}
