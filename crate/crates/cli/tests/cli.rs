use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn ksr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksr"))
        .args(args)
        .env("KSR_THREADS", "1")
        .output()
        .expect("spawn ksr")
}

fn ok(args: &[&str]) -> String {
    let out = ksr(args);
    assert!(
        out.status.success(),
        "ksr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = ksr(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Digest of every file under `dir` except run manifests, in path order.
fn dir_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn mask16(dir: &Path) -> PathBuf {
    let p = dir.join("mask.txt");
    ok(&["mask", "--lines", "16", "--factor", "4", "--kind", "custom", "--out", s(&p)]);
    p
}

fn synth(dir: &Path, n: usize, name: &str) -> PathBuf {
    let mask = mask16(dir);
    let out = dir.join(name);
    ok(&["synth", "--n", &n.to_string(), "--shape", "16x16", "--mask", s(&mask), "--seed", "3", "--out", s(&out)]);
    out
}

fn config(dir: &Path, epochs: usize, lr: f64) -> PathBuf {
    let p = dir.join("config.json");
    let text = format!(
        r#"{{"model": {{"depth": 1, "base_width": 4, "num_layers": 1}}, "train": {{"epochs": {epochs}, "lr": {lr}, "patience": 50}}}}"#
    );
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn mask_reports_kept_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.txt");
    let stdout = ok(&["mask", "--lines", "292", "--factor", "4", "--kind", "custom", "--center-frac", "0.8", "--out", s(&out)]);
    assert!(stdout.contains("kept 73 of 292"), "{stdout}");
    assert!(out.exists());
    assert!(dir.path().join("m.txt.run.json").exists());

    let stdout = ok(&["mask", "--lines", "64", "--factor", "1", "--kind", "center", "--out", s(&out)]);
    assert!(stdout.contains("kept 64 of 64") && stdout.contains("acceleration 1.0000"), "{stdout}");
}

#[test]
fn invalid_center_fraction_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.txt");
    let (c, err) = code(&["mask", "--lines", "64", "--factor", "4", "--center-frac", "1.2", "--out", s(&out)]);
    assert_eq!(c, 2);
    assert!(err.contains("center fraction"), "{err}");
    assert!(!out.exists());
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ksr"))
        .args(["mask", "--lines", "8", "--factor", "2", "--out", s(&dir.path().join("m"))])
        .env("KSR_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_triples_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 3, "a");
    let names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".raw")).count(), 9);
    assert!(names.contains(&"manifest.jsonl".to_string()));
    assert_eq!(names.iter().filter(|n| n.as_str() == "run.json").count(), 1);
    assert_eq!(names.len(), 11);

    let b = dir.path().join("b");
    ok(&["synth", "--n", "3", "--shape", "16x16", "--mask", s(&dir.path().join("mask.txt")), "--seed", "3", "--out", s(&b)]);
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn synth_missing_mask_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (c, err) = code(&["synth", "--n", "2", "--shape", "16x16", "--mask", "/nonexistent/mask.txt", "--out", s(&dir.path().join("d"))]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(&["synth", "--n", "2", "--shape", "16by16", "--mask", "m", "--out", "d"]);
    assert_eq!(c, 2);
}

#[test]
fn corrupt_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, "d");
    let raw = data.join("s00000_t2.raw");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..30]).unwrap();
    let (c, err) = code(&["train", "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn train_writes_one_history_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10, "d");
    let cfg = config(dir.path(), 3, 1e-3);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--model", "unimodal", "--config", s(&cfg), "--out", s(&run)]);
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4, "{hist}");
    let ck: serde_json::Value = serde_json::from_slice(&fs::read(run.join("best.json")).unwrap()).unwrap();
    assert_eq!(ck["config"]["multimodal"], false);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    // Defaults are dumped in full.
    assert_eq!(manifest["args"]["config"]["train"]["batch_size"], 4);
    assert!(manifest["duration_secs"].as_f64().unwrap() > 0.0);

    let (c, err) = code(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(c, 2, "a second run into the same directory must be refused: {err}");
}

#[test]
fn config_schema_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, "d");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "learning_rate": 0.1}}"#).unwrap();
    let (c, err) = code(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(c, 2);
    assert!(err.contains("learning_rate"), "{err}");
    fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert_eq!(code(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]).0, 2);
}

#[test]
fn resume_continues_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10, "d");
    let cfg = config(dir.path(), 4, 1e-3);
    let run = dir.path().join("run");
    let args = ["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)];
    ok(&[&args[..], &["--stop-after", "2"]].concat());
    let epochs = |p: &Path| -> Vec<usize> {
        fs::read_to_string(p.join("history.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect()
    };
    assert_eq!(epochs(&run), vec![1, 2]);
    ok(&[&args[..], &["--resume"]].concat());
    assert_eq!(epochs(&run), vec![1, 2, 3, 4]);

    let (c, err) = code(&["train", "--data", s(&data), "--config", s(&cfg), "--seed", "9", "--out", s(&run), "--resume"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("resume"), "{err}");
}

#[test]
fn eval_recon_plot_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 16, "d");
    let cfg = config(dir.path(), 25, 5e-3);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join("best.json");

    let ev = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&ev)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("summary.json")).unwrap()).unwrap();
    let lines = fs::read_to_string(ev.join("metrics.jsonl")).unwrap();
    let ssims: Vec<f64> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["ssim"].as_f64().unwrap())
        .collect();
    assert_eq!(ssims.len(), 16);
    let mean = ssims.iter().sum::<f64>() / ssims.len() as f64;
    assert!((summary["model"]["mean_ssim"].as_f64().unwrap() - mean).abs() < 1e-12);
    let zf = summary["zero_filled"]["mean_ssim"].as_f64().unwrap();
    assert!(mean > zf, "model {mean} vs zero-filled {zf}");
    assert_eq!(fs::read_dir(ev.join("panels")).unwrap().count(), 16);

    let mask = dir.path().join("mask.txt");
    let t2 = data.join("s00001_t2.raw");
    let flair = data.join("s00001_flair.raw");
    let recon = |out: &Path| ok(&["recon", "--t2", s(&t2), "--flair", s(&flair), "--mask", s(&mask), "--checkpoint", s(&ck), "--out", s(out)]);
    let (r1, r2) = (dir.path().join("r1.raw"), dir.path().join("r2.raw"));
    recon(&r1);
    recon(&r2);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let (c, _) = code(&["recon", "--t2", s(&t2), "--mask", s(&mask), "--checkpoint", s(&ck), "--out", s(&r1)]);
    assert_eq!(c, 2, "a multimodal checkpoint needs --flair");

    let svg = dir.path().join("loss.svg");
    ok(&["plot", "--history", s(&run.join("history.csv")), "--out", s(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));

    let again = dir.path().join("run2");
    ok(&["replay", "--manifest", s(&run.join("run.json")), "--out", s(&again)]);
    assert_eq!(dir_digest(&run), dir_digest(&again));
    let ev2 = dir.path().join("eval2");
    ok(&["replay", "--manifest", s(&ev.join("run.json")), "--out", s(&ev2)]);
    assert_eq!(dir_digest(&ev), dir_digest(&ev2));
}
