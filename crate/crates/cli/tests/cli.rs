use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dloseg::backbone::{BackboneConfig, StubConfig};
use dloseg::dataset::{format_id, rgb_path, Split};
use dloseg::prompt_encoder::AdapterConfig;
use dloseg::trainer::TrainConfig;
use serde_json::Value;

fn dloseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dloseg"))
        .args(args)
        .env_remove("DLOSEG_RUN_DIR")
        .env_remove("DLOSEG_CHECKPOINT")
        .env("DLOSEG_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixtures(root: &Path, splits: &[&str]) {
    let mut args = vec!["fixtures", "--out", s(root), "--n", "2", "--size", "64"];
    for sp in splits {
        args.extend(["--split", sp]);
    }
    let out = dloseg(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

/// Small adapter and backbone so a CLI training run takes well under a second.
fn tiny_config_file(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 0.5,
        adapter: AdapterConfig::tiny(),
        backbone: BackboneConfig {
            stub: StubConfig::tiny(),
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    };
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Trains a tiny adapter on a fresh fixture set; returns (dataset root, run dir).
fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    fixtures(&data, &["train", "test"]);
    let cfg = tiny_config_file(tmp);
    let run = tmp.join("run");
    let out = dloseg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--run-dir",
        s(&run),
        "--set",
        "seed=3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (data, run)
}

#[test]
fn fixtures_validate_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fixtures(&data, &["train", "val", "test"]);
    let out = dloseg(&["validate", "--root", s(&data), "--strict"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&data.join("validation.json"));
    assert_eq!(report["records"], 6);
    assert_eq!(report["defects"].as_array().unwrap().len(), 0);
    assert_eq!(read_json(&data.join("manifest.json"))["command"], "validate");
}

#[test]
fn fixture_splits_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fixtures(&data, &["train", "test"]);
    let a = fs::read(rgb_path(&data, Split::Train, &format_id(0))).unwrap();
    let b = fs::read(rgb_path(&data, Split::Test, &format_id(0))).unwrap();
    assert_ne!(a, b);
}

#[test]
fn validate_without_splits_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dloseg(&["validate", "--root", s(tmp.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_without_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dloseg(&["train", "--run-dir", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}

#[test]
fn unknown_override_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dloseg(&[
        "train",
        "--run-dir",
        s(&tmp.path().join("run")),
        "--set",
        "optimizer.momentum=0.9",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("optimizer.momentum"), "{}", stderr(&out));
}

#[test]
fn unknown_config_file_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 3, "learning_rate": 0.1}"#).unwrap();
    let out = dloseg(&["train", "--config", s(&cfg), "--run-dir", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn train_writes_manifest_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = trained(tmp.path());
    for f in ["last.safetensors", "best.safetensors", "metrics.csv", "steps.csv", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let m = read_json(&run.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["backbone_mode"], "stub");
    assert_eq!(m["overrides"]["seed"], 3);
    assert_eq!(m["outputs"]["steps"], 4);
    assert_eq!(read_json(&run.join("config.json"))["seed"], 3);
}

#[test]
fn eval_is_deterministic_and_oracle_dominates() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path());
    let ckpt = run.join("last.safetensors");
    let mut reports = Vec::new();
    for (dir, oracle) in [("e1", false), ("e2", false), ("e3", true)] {
        let out_dir = tmp.path().join(dir);
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out_dir)];
        if oracle {
            args.push("--oracle");
        }
        let out = dloseg(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let m = read_json(&out_dir.join("manifest.json"));
        assert_eq!(m["status"], "ok");
        reports.push(m["outputs"].clone());
    }
    assert_eq!(reports[0]["fingerprint"], reports[1]["fingerprint"]);
    assert_eq!(reports[0]["miou"], reports[1]["miou"]);
    let (cls, ora) = (reports[0]["miou"].as_f64().unwrap(), reports[2]["miou"].as_f64().unwrap());
    assert!(ora >= cls, "oracle {ora} < classifier {cls}");
    assert!(tmp.path().join("e3/eval_oracle.json").is_file());
}

#[test]
fn eval_against_a_different_backbone_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path());
    let ckpt = run.join("last.safetensors");
    let out = dloseg(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("e")),
        "--backbones",
        "stub",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn eval_on_empty_split_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path());
    fs::create_dir_all(rgb_path(&data, Split::Val, "x").parent().unwrap()).unwrap();
    let out = dloseg(&[
        "eval",
        "--checkpoint",
        s(&run.join("last.safetensors")),
        "--data",
        s(&data),
        "--split",
        "val",
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn infer_writes_overlay_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path());
    let ckpt = run.join("last.safetensors");
    let image = rgb_path(&data, Split::Test, &format_id(0));
    for text in ["cables", "wires"] {
        let out_dir = tmp.path().join(text);
        let out = dloseg(&[
            "infer",
            "--image",
            s(&image),
            "--text",
            text,
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let overlay = image::open(out_dir.join("overlay.png")).unwrap();
        assert_eq!((overlay.width(), overlay.height()), (64, 64));
        let summary = read_json(&out_dir.join("summary.json"));
        assert_eq!(summary["text"], text);
        for inst in summary["instances"].as_array().unwrap() {
            assert!(out_dir.join(inst["mask"].as_str().unwrap()).is_file());
        }
    }
}

#[test]
fn corrupted_image_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = trained(tmp.path());
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let out = dloseg(&[
        "infer",
        "--image",
        s(&bad),
        "--checkpoint",
        s(&run.join("last.safetensors")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("x.png");
    image::RgbImage::new(64, 64).save(&img).unwrap();
    let out = dloseg(&[
        "infer",
        "--image",
        s(&img),
        "--checkpoint",
        s(&tmp.path().join("none.safetensors")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
