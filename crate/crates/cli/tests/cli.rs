use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use loftup_core::io::checkpoint::load_checkpoint;
use loftup_core::io::features::read_lfuf;

fn loftup(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loftup"))
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", "1")
        .args(args)
        .output()
        .expect("spawn loftup")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_train_upsample_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&loftup(d, &["synth-data", "--n", "8", "--seed", "0", "--out", "d/"]));
    assert_eq!(fs::read_dir(d.join("d/images")).unwrap().count(), 8);

    ok(&loftup(d, &["train-stage1", "--data", "d/", "--steps", "10", "--out", "c/"]));
    let (manifest, params) = load_checkpoint(&d.join("c")).unwrap();
    assert_eq!(manifest.stage, 1);
    assert_eq!(manifest.step, 10);
    assert!(!params.is_empty());
    let log = fs::read_to_string(d.join("c/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "stage", "loss", "lr", "t", "wall_ms"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }

    let image = fs::read_dir(d.join("d/images")).unwrap().next().unwrap().unwrap().path();
    let image = image.to_str().unwrap();
    ok(&loftup(d, &["upsample", "--ckpt", "c/", "--image", image, "--res", "448", "--out", "y.lfuf"]));
    let f = read_lfuf(d.join("y.lfuf")).unwrap();
    assert_eq!((f.channels(), f.height(), f.width()), (32, 448, 448));

    ok(&loftup(d, &["train-stage2", "--data", "d/", "--ckpt", "c/", "--steps", "2", "--out", "c2/"]));
    let (m2, p2) = load_checkpoint(&d.join("c2")).unwrap();
    assert_eq!(m2.stage, 2);
    assert_ne!(p2, params);
    let log2 = fs::read_to_string(d.join("c2/metrics.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(log2.lines().next().unwrap()).unwrap();
    assert!(v["t"].as_f64().unwrap() >= 2.0);

    ok(&loftup(d, &["visualize", "--ckpt", "c/", "--image", image, "--out", "pca.png"]));
    assert!(d.join("pca.png").exists());
}

#[test]
fn replay_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&loftup(d, &["synth-data", "--n", "4", "--seed", "3", "--out", "d", "--res", "32"]));
    for run in ["a", "b"] {
        ok(&loftup(d, &["train-stage1", "--data", "d", "--steps", "3", "--seed", "5", "--out", run]));
    }
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 2);
    for name in names {
        if name == "metrics.jsonl" {
            continue;
        }
        assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = loftup(d, &["train-stage1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(loftup(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(loftup(d, &["bench", "--upsampler", "loftup", "--bogus"]).status.code(), Some(1));
    assert_eq!(loftup(d, &["bench", "--upsampler", "nearest"]).status.code(), Some(1));
    assert_eq!(loftup(d, &["train-stage2", "--data", "d"]).status.code(), Some(1));
    assert_eq!(loftup(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(loftup(d, &["train-stage1", "--data", "missing"]).status.code(), Some(2));
    assert_eq!(
        loftup(d, &["upsample", "--ckpt", "nowhere", "--image", "x.png", "--out", "y.lfuf"]).status.code(),
        Some(2)
    );
}

#[test]
fn config_file_sets_model_and_stage_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("run.toml"),
        "[backbone]\npatch_size = 8\nchannels = 16\n\n[model]\nkind = \"resize-conv\"\nchannels = 16\nstages = 1\n\n[stage1]\nbatch_size = 2\n",
    )
    .unwrap();
    ok(&loftup(d, &["synth-data", "--n", "2", "--out", "d", "--res", "32"]));
    ok(&loftup(d, &["--config", "run.toml", "train-stage1", "--data", "d", "--epochs", "2", "--out", "c"]));
    let (m, p) = load_checkpoint(&d.join("c")).unwrap();
    assert_eq!(m.backbone.channels, 16);
    assert_eq!(m.step, 2);
    assert_eq!(m.train.unwrap().batch_size, 2);
    assert!(p.contains("stages.0.conv.weight"));

    fs::write(d.join("bad.toml"), "[stage1]\nno_such_key = 1\n").unwrap();
    let out = loftup(d, &["--config", "bad.toml", "train-stage1", "--data", "d"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn probe_bench_and_rle_import() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&loftup(d, &["synth-data", "--n", "6", "--out", "d", "--res", "32"]));
    for src in ["lowres", "bilinear"] {
        let out = loftup(d, &["probe", "--data", "d", "--upsampler", src, "--epochs", "1", "--out", "probe.jsonl"]);
        ok(&out);
    }
    let lines: Vec<serde_json::Value> = fs::read_to_string(d.join("probe.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["source"], "lowres");
    for l in &lines {
        let m = l["miou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }

    let out = loftup(d, &["bench", "--upsampler", "bilinear", "--res", "32", "--n", "1", "--channels", "8"]);
    ok(&out);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["params"], 0);

    // 2×2 image, one mask covering the left column.
    fs::write(d.join("ann.json"), r#"{"annotations": [{"segmentation": {"size": [2, 2], "counts": [0, 2, 2]}}]}"#).unwrap();
    ok(&loftup(d, &["import-rle", "--json", "ann.json", "--out", "m/x.png"]));
    let labels = loftup_core::io::png::read_labels(&d.join("m/x.png")).unwrap();
    assert_eq!(labels.labels(), &[1, 0, 1, 0]);
}
