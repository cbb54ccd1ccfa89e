use std::path::Path;
use std::process::{Command, Output};

use furn_core::config::TrainConfig;
use serde_json::Value;

fn furn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_furn")).args(args).output().expect("spawn furn")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "furn failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.lines().last().unwrap()).expect("stderr ends with a JSON error");
    assert!(v["error"]["message"].is_string());
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, steps: u64) -> std::path::PathBuf {
    let mut cfg = TrainConfig::desk();
    cfg.steps = steps;
    cfg.checkpoint_every = 2;
    cfg.batch_size = 2;
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_train_sr_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let v = stdout_json(&furn(&["synth", "--out", p(&data), "--count", "4", "--test-count", "2", "--hr-size", "32"]));
    assert_eq!((v["train"].as_u64(), v["test"].as_u64()), (Some(4), Some(2)));

    let cfg = small_config(tmp.path(), 3);
    let v = stdout_json(&furn(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--variant", "ridb", "--seed", "3",
    ]));
    assert_eq!(v["steps"], 3);
    assert_eq!(v["variant"], "ridb");
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 2);

    let lr = tmp.path().join("lr.png");
    furn_core::data::synth_face(8, 1, 0).save_png(&lr).unwrap();
    let sr = tmp.path().join("sr.png");
    let v = stdout_json(&furn(&["sr", "--checkpoint", p(&run), "--input", p(&lr), "--output", p(&sr)]));
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(32), Some(32)));
    assert_eq!(furn_core::data::load_image(&sr).unwrap().height(), 32);

    let report = tmp.path().join("out/report.json");
    let v = stdout_json(&furn(&["eval", "--checkpoint", p(&run), "--data", p(&data), "--report", p(&report)]));
    assert_eq!(v["count"], 2);
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed = furn_core::eval::MetricsReport::from_json(&text).unwrap();
    assert_eq!(parsed.step, 3);
    assert_eq!(parsed.sanity.psnr, 100.0);
}

#[test]
fn prepare_writes_hr_and_lr_folders() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("raw");
    std::fs::create_dir_all(&input).unwrap();
    for i in 0..3 {
        furn_core::data::synth_face(40, 2, i).save_png(&input.join(format!("f{i}.png"))).unwrap();
    }
    let out = tmp.path().join("prepared");
    let v = stdout_json(&furn(&[
        "prepare", "--input", p(&input), "--output", p(&out), "--hr-size", "32", "--scales", "4,8",
    ]));
    assert_eq!(v["lr_dirs"].as_array().unwrap().len(), 2);
    let lr8 = furn_core::data::load_image(&out.join("lr_x8/f0.png")).unwrap();
    assert_eq!((lr8.height(), lr8.width()), (4, 4));
}

#[test]
fn unknown_variant_is_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = furn(&["train", "--data", p(tmp.path()), "--out", p(tmp.path()), "--variant", "xyz"]);
    assert_eq!(error_kind(&out), "UnknownVariant");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("in.png");
    furn_core::data::synth_face(8, 0, 0).save_png(&img).unwrap();
    let out = furn(&["sr", "--checkpoint", p(&tmp.path().join("nope")), "--input", p(&img), "--output", "x.png"]);
    assert_eq!(error_kind(&out), "IoError");
}

#[test]
fn unreadable_image_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    stdout_json(&furn(&["synth", "--out", p(&data), "--count", "2", "--hr-size", "32"]));
    let cfg = small_config(tmp.path(), 1);
    stdout_json(&furn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--variant", "ridb"]));
    let bogus = tmp.path().join("bogus.png");
    std::fs::write(&bogus, b"not an image").unwrap();
    let out = furn(&["sr", "--checkpoint", p(&run), "--input", p(&bogus), "--output", p(&tmp.path().join("o.png"))]);
    let kind = error_kind(&out);
    assert!(kind == "UnsupportedFormat" || kind == "UnreadableFile", "{kind}");
}

#[test]
fn usage_errors_are_json_too() {
    let out = furn(&["train", "--data"]);
    assert_eq!(error_kind(&out), "UsageError");
    assert!(furn(&["--help"]).status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = TrainConfig::load(&dir.join("desk.json")).unwrap();
    assert_eq!(desk, TrainConfig::desk());
    let full = TrainConfig::load(&dir.join("full.json")).unwrap();
    assert_eq!((full.batch_size, full.steps, full.generator.base_channels), (8, 30_000, 64));
    assert_eq!(full.optimizer.learning_rate, 1e-4);
}
