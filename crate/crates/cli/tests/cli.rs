use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskflow::codec::Codec;
use maskflow::data::{load_split, Manifest, Split};
use maskflow::train::{train_until, LatentCorpus, TrainConfig, TrainState};

fn maskflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskflow"))
        .args(args)
        .env_remove("MASKFLOW_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = maskflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, value: serde_json::Value) -> PathBuf {
    fs::write(path, value.to_string()).unwrap();
    path.to_path_buf()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

const SUBCOMMANDS: [&str; 10] = [
    "gen-data",
    "train-codec",
    "analyze-latents",
    "plot-samplers",
    "train",
    "segment",
    "sample",
    "eval",
    "ablate",
    "reproduce",
];

#[test]
fn every_subcommand_has_help() {
    let top = ok(&["--help"]);
    for sub in SUBCOMMANDS {
        assert!(top.contains(sub), "{sub} missing from top-level help");
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("--"), "{sub}: {help}");
    }
    assert!(ok(&["plot-samplers", "--help"]).contains("[default: 1000]"));
}

#[test]
fn plot_samplers_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    ok(&["plot-samplers", "--a", "0.05", "--grid", "1000", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,a,t,pdf,cdf");
    assert_eq!(lines.len(), 1001);

    ok(&["plot-samplers", "--a", "0.05", "--a", "0.5", "--gen", "--grid", "11", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 11);
    assert!(text.lines().nth(1).unwrap().starts_with("gen,"));
}

#[test]
fn bad_invocations_exit_with_one() {
    let out = maskflow(&["plot-samplers", "--bogus", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = maskflow(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nothing");
    let out = maskflow(&["eval", "--ckpt", p(&ckpt), "--codec", p(&ckpt), "--data", p(&ckpt), "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(p(&ckpt)), "{err}");

    let out = maskflow(&["plot-samplers", "--a", "-1", "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = maskflow(&["--threads", "0", "plot-samplers", "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dump_config_prints_defaults() {
    let text = ok(&["train", "--data", "d", "--codec", "c", "--out", "o", "--dump-config", "--steps", "7"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["steps"], 7);
    assert_eq!(v["seg_a"], 0.05);
    assert_eq!(v["supervision"], "mse_latent");

    let text = ok(&["gen-data", "--out", "o", "--dump-config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["size"], 32);

    let text = ok(&["ablate", "--data", "d", "--codec", "c", "--out", "o", "--dump-config", "--arms", "a=0.5"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["base", "a=0.5"]);
}

/// Every stage end to end on 8×8 scenes with a two-block model.
#[test]
fn tiny_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let scene = write_json(
        &r.join("scene.json"),
        serde_json::json!({ "size": 8, "max_shapes": 2, "min_radius": 1.5, "max_radius": 3.0 }),
    );
    let codec_cfg = write_json(
        &r.join("codec.json"),
        serde_json::json!({ "factor": 2, "latent": 4, "widths": [4, 4], "batch": 4, "calibration": 16 }),
    );
    let model = serde_json::json!({
        "dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2, "grid_h": 4, "grid_w": 4,
        "channels": 4, "cond_dim": 8, "max_cond": 8, "freqs": 8
    });
    let train_cfg = write_json(
        &r.join("train.json"),
        serde_json::json!({ "steps": 6, "batch": 4, "checkpoint_every": 3, "lr_max": 3e-3, "lr_min": 1e-3, "model": model }),
    );
    let study = serde_json::json!({ "probe_train": 12, "t_grid": [0.0, 0.5, 1.0], "seeds": [0] });
    let analysis_cfg = write_json(&r.join("study.json"), study.clone());
    let repro_cfg = write_json(
        &r.join("repro.json"),
        serde_json::json!({ "study": study, "fig4_count": 2, "density_points": 11 }),
    );

    let data = r.join("data");
    ok(&["gen-data", "--out", p(&data), "--train", "12", "--val", "4", "--seed", "3", "--config", p(&scene)]);
    assert!(data.join("manifest.json").exists());

    let codec = r.join("codec");
    ok(&["train-codec", "--data", p(&data), "--out", p(&codec), "--steps", "10", "--config", p(&codec_cfg)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(codec.join("report.json")).unwrap()).unwrap();
    assert!(report["val_psnr_db"].as_f64().unwrap().is_finite());
    assert_eq!(fs::read_to_string(codec.join("log.jsonl")).unwrap().lines().count(), 10);

    let analysis = r.join("analysis");
    ok(&["analyze-latents", "--data", p(&data), "--codec", p(&codec), "--out", p(&analysis), "--config", p(&analysis_cfg)]);
    assert_eq!(fs::read_to_string(analysis.join("sweep.csv")).unwrap().lines().count(), 4);
    assert!(analysis.join("pca.json").exists());

    let run = r.join("run");
    ok(&["train", "--data", p(&data), "--codec", p(&codec), "--out", p(&run), "--config", p(&train_cfg)]);
    assert!(run.join("final/state.json").exists());

    // An interrupted run: three of six steps done, checkpoint in `latest`.
    let split = r.join("split");
    {
        let codec = Codec::load(&codec).unwrap();
        let m = Manifest::load(&data).unwrap();
        let train = load_split(&data, &m, Split::Train).unwrap();
        let corpus = LatentCorpus::build(&codec, &train).unwrap();
        let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&train_cfg).unwrap()).unwrap();
        let mut state = TrainState::new(cfg, codec.latent_channels(), codec.config.factor).unwrap();
        let mut log = Vec::new();
        train_until(&mut state, 3, &corpus, &codec, None, Some(&mut log)).unwrap();
        state.save(&split.join("latest"), codec.config.factor).unwrap();
        fs::write(split.join("log.jsonl"), log).unwrap();
    }
    ok(&["train", "--data", p(&data), "--codec", p(&codec), "--out", p(&split), "--config", p(&train_cfg), "--resume"]);
    assert_eq!(
        fs::read(run.join("final/params.ckpt")).unwrap(),
        fs::read(split.join("final/params.ckpt")).unwrap(),
        "resumed run diverged"
    );
    let log = fs::read_to_string(split.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"total\"")).count(), 6);

    let ckpt = run.join("final");
    let eval_out = r.join("eval/report.json");
    let text = ok(&["eval", "--ckpt", p(&ckpt), "--codec", p(&codec), "--data", p(&data), "--out", p(&eval_out)]);
    assert!(text.contains("miou"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let image = data.join("val/00012_image.png");
    let mask = r.join("mask.png");
    ok(&["segment", "--ckpt", p(&ckpt), "--codec", p(&codec), "--image", p(&image), "--query", "red circle", "--out", p(&mask)]);
    assert!(mask.exists());
    let out = maskflow(&["segment", "--ckpt", p(&ckpt), "--codec", p(&codec), "--image", p(&image), "--query", "plaid blob", "--out", p(&mask)]);
    assert_eq!(out.status.code(), Some(1));

    let samples = r.join("samples");
    ok(&[
        "sample", "--ckpt", p(&ckpt), "--codec", p(&codec), "--caption", "red circle, blue square", "--count", "2",
        "--steps", "3", "--guidance", "2", "--out", p(&samples),
    ]);
    assert!(samples.join("000.png").exists() && samples.join("001.png").exists());

    let ablation = r.join("ablation");
    let base = write_json(
        &r.join("base.json"),
        serde_json::json!({ "steps": 2, "batch": 4, "checkpoint_every": 0, "model": model }),
    );
    ok(&["ablate", "--base", p(&base), "--data", p(&data), "--codec", p(&codec), "--out", p(&ablation), "--arms", "a=0.5"]);
    let csv = fs::read_to_string(ablation.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("arm,factor,value,miou,oiou,delta_miou,delta_oiou,fingerprint"));

    let first = r.join("first");
    let second = r.join("second");
    for out in [&first, &second] {
        ok(&[
            "--deterministic", "reproduce", "--data", p(&data), "--codec", p(&codec), "--ablation", p(&ablation),
            "--out", p(out), "--config", p(&repro_cfg),
        ]);
    }
    let (a, b) = (tree(&first), tree(&second));
    for name in ["fig5.csv", "fig6.csv", "tables.csv", "manifest.json", "fig4/00_mask.png", "fig4/01_pca_otsu.png"] {
        assert!(a.contains_key(name), "{name} missing");
    }
    assert!(a == b, "reproduce is not byte-identical");
}
