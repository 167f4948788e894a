use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_longiseg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
[synth]
shape = [24, 24, 24]
splits = [2, 1, 1]

[model]
preset = "tiny"

[train]
epochs = 1
batch_size = 4
samples_per_epoch = 12
val_samples = 8
learning_rate = 0.001

[data]
shape = [16, 16, 16]
"#,
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let out: Value = serde_json::from_str(&ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "4"])).unwrap();
    assert_eq!(out["patients"], 4);
    let manifest: Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 4);

    // same seed, same bytes
    let again = dir.path().join("again");
    ok(&["synth", "--config", s(&cfg), "--out", s(&again), "--seed", "4"]);
    let f = "test/patient003/t2_image.nii.gz";
    assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());

    let ckpt = dir.path().join("model/tiny.ckpt");
    let out: Value = serde_json::from_str(&ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--seed", "4",
    ]))
    .unwrap();
    assert_eq!(out["best_epoch"], 1);
    let log = std::fs::read_to_string(dir.path().join("model/tiny.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,split,loss,dice_ggo,dice_cons"));
    assert_eq!(log.lines().count(), 3);

    let report = dir.path().join("report");
    let csv = ok(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--rounds", "1", "--out", s(&report),
    ]);
    assert!(csv.starts_with("round,dice_ggo,dice_cons,dice_mean\n0,"));
    assert_eq!(csv.lines().count(), 3);
    let full: Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(full["patients"][0]["patient"], "patient003");
    assert_eq!(full["patients"][0]["rounds"].as_array().unwrap().len(), 2);
    for line in std::fs::read_to_string(report.join("metrics.jsonl")).unwrap().lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        for key in ["round", "class", "metric", "mean", "stderr", "n"] {
            assert!(row.get(key).is_some(), "{line}");
        }
    }

    let gt = data.join("test/patient003/t2_labels.nii.gz");
    let m: Value = serde_json::from_str(&ok(&["metrics", "--pred", s(&gt), "--gt", s(&gt)])).unwrap();
    for class in ["ggo", "cons"] {
        assert_eq!(m[class]["dsc"], 1.0);
        assert_eq!(m[class]["vd"], 0.0);
        assert_eq!(m[class]["fp"], 0);
    }
    let other = data.join("test/patient003/t1_labels.nii.gz");
    let m: Value = serde_json::from_str(&ok(&["metrics", "--pred", s(&other), "--gt", s(&gt)])).unwrap();
    let g = &m["ggo"];
    let (tp, fp, fn_) = (g["tp"].as_f64().unwrap(), g["fp"].as_f64().unwrap(), g["fn"].as_f64().unwrap());
    assert!((g["dsc"].as_f64().unwrap() - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);

    let pre = dir.path().join("pre");
    let p = "train/patient000";
    let out: Value = serde_json::from_str(&ok(&[
        "preprocess",
        "--ref", s(&data.join(format!("{p}/t1_image.nii.gz"))),
        "--target", s(&data.join(format!("{p}/t2_image.nii.gz"))),
        "--ref-seg", s(&data.join(format!("{p}/t1_labels.nii.gz"))),
        "--target-seg", s(&data.join(format!("{p}/t2_labels.nii.gz"))),
        "--ref-lung", s(&data.join(format!("{p}/t1_lung.nii.gz"))),
        "--target-lung", s(&data.join(format!("{p}/t2_lung.nii.gz"))),
        "--backend", "identity",
        "--shape", "12,10,8",
        "--out", s(&pre),
    ]))
    .unwrap();
    assert_eq!(out["shape"], serde_json::json!([12, 10, 8]));
    for f in ["reference.nii.gz", "target.nii.gz", "reference_seg.nii.gz", "target_seg.nii.gz", "preprocess.json"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.nii.gz");
    let out = run(&["metrics", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.nii.gz"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nrefine_probability = 2.0\n").unwrap();
    let out = run(&["synth", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train: invalid configuration: refine_probability"));

    std::fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["synth", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let json_cfg = dir.path().join("c.json");
    std::fs::write(&json_cfg, r#"{"data": {"backend": "elastix"}}"#).unwrap();
    let out = run(&["synth", "--config", s(&json_cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path()), "--out", s(dir.path()), "--cap", "0"]);
    assert_eq!(out.status.code(), Some(3));

    // a file that is not a checkpoint
    std::fs::write(dir.path().join("x.ckpt"), b"not a checkpoint").unwrap();
    let out = run(&["serve", "--checkpoint", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(6));

    let out = run(&["train", "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors");
}

#[test]
fn serve_answers_health_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--port", &port.to_string()])
        .args(["--data-dir", s(&dir.path().join("sessions"))])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let body = loop {
        if let Ok(mut stream) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            stream
                .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
                .unwrap();
            let mut text = String::new();
            stream.read_to_string(&mut text).unwrap();
            break text;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("\"status\":\"ok\""));
}
