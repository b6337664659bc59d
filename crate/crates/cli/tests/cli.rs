use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn medvkan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvkan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn result(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("result.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = medvkan(&["synth", "--seed", "7", "--n", "8", "--size", "64", "--classes", "2", "--out", s(d)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for i in 0..8 {
        for kind in ["image", "label"] {
            let f = format!("{kind}_{i:04}.vkt");
            assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
        }
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 8);
    assert_eq!(result(&a)["seed"], 7);
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["synth", "--n", "2", "--size", "32", "--bogus"], &["gradcheck", "--module", "nope"]] {
        let out = medvkan(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(medvkan(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_kan_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = medvkan(&["gradcheck", "--module", "kan", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = result(tmp.path());
    assert_eq!(r["failed"], 0);
    for case in r["cases"].as_array().unwrap() {
        assert!(case["max_rel_err"].as_f64().unwrap() <= 1e-4);
    }
}

#[test]
fn bench_scan_reports_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let out = medvkan(&["bench-scan", "--L", "100", "--D", "4", "--N", "8", "--seed", "3", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let r = result(tmp.path());
    assert_eq!(r["equivalent"], true);
    assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn params_prints_reference_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("full.json");
    std::fs::write(&cfg, medvkan::net::ModelConfig::full(3, 2).to_json()).unwrap();
    let out = medvkan(&["params", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("51M"), "{text}");
    assert!(text.contains("vkan_e5"));
    let r = result(tmp.path());
    assert_eq!(r["total"], 70_084_430);
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    medvkan(&["synth", "--seed", "1", "--n", "4", "--size", "32", "--out", s(&data)]);
    let manifest = data.join("manifest.json");
    let train = |dir: &Path| {
        let out = medvkan(&[
            "train", "--manifest", s(&manifest), "--max-steps", "4", "--batch-size", "2", "--seed", "5", "--out", s(dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.join("checkpoint.vkc")).unwrap()
    };
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    assert_eq!(train(&r1), train(&r2));
    assert_eq!(result(&r1)["lrs"].as_array().unwrap().len(), 4);

    let ckpt = r1.join("checkpoint.vkc");
    let ev = tmp.path().join("eval");
    let out = medvkan(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tau", "2", "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(0));
    let keys: Vec<String> = result(&ev).as_object().unwrap().keys().cloned().collect();
    let mut expect = vec![
        "num_classes", "tau", "sample_count", "dice", "iou", "nsd", "mean_foreground_dice", "mean_foreground_iou",
        "mean_foreground_nsd", "instance_f1", "instance_precision", "instance_recall",
    ];
    expect.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, expect);

    let pr = tmp.path().join("pred");
    let out = medvkan(&["predict", "--checkpoint", s(&ckpt), "--image", s(&data.join("image_0000.vkt")), "--out", s(&pr)]);
    assert_eq!(out.status.code(), Some(0));
    let labels = medvkan::data::read_tensor(pr.join("labels.vkt")).unwrap();
    assert_eq!(labels.shape(), &[32, 32]);

    let three = tmp.path().join("three");
    medvkan(&["synth", "--seed", "1", "--n", "2", "--size", "32", "--classes", "3", "--out", s(&three)]);
    let out = medvkan(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&three.join("manifest.json")), "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(1));
}
