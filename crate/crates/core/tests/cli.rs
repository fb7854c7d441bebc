use std::path::Path;
use std::process::{Command, Output};

fn qcnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The first number after `label` in `text`.
fn number_after(text: &str, label: &str) -> f64 {
    let rest = &text[text.find(label).unwrap_or_else(|| panic!("{label:?} not in {text:?}")) + label.len()..];
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn check_equivariance_reports_tiny_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcnn(dir.path(), &["check-equivariance", "--trials", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(number_after(&stdout(&o), "max deviation") < 1e-10);
}

#[test]
fn grad_check_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcnn(dir.path(), &["grad-check", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(number_after(&stdout(&o), "max relative gradient error") < 1e-4);
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.qgc", "b.qgc"] {
        let o = qcnn(dir.path(), &["gen-data", "--classes", "10", "--per-class", "120", "--seed", "7", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.qgc")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.qgc")).unwrap());
    assert_eq!(a.len(), 20 + 1200 * (4 + 100 * 12));
    let manifest = std::fs::read_to_string(dir.path().join("a.json")).unwrap();
    assert!(manifest.contains("\"seed\": 7"));
}

#[test]
fn train_then_eval_and_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"model": "compact-cnn", "epochs": 2, "batch_size": 8}"#).unwrap();
    assert!(qcnn(d, &["gen-data", "--classes", "4", "--per-class", "10", "--out", "four.qgc"]).status.success());
    assert!(qcnn(d, &["gen-data", "--classes", "3", "--per-class", "4", "--out", "three.qgc"]).status.success());
    let o = qcnn(d, &["train", "--data", "four.qgc", "--config", "cfg.json", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(d.join("m.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,train_loss,val_top1,val_top5,clip_events"));
    assert_eq!(metrics.lines().count(), 3);

    let o = qcnn(d, &["eval", "--checkpoint", "m.ckpt", "--data", "four.qgc", "--out", "report.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("top-1"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 40);

    let o = qcnn(d, &["eval", "--checkpoint", "m.ckpt", "--data", "three.qgc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = qcnn(d, &["gen-data", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(qcnn(d, &["no-such-command"]).status.code(), Some(1));
    let o = qcnn(d, &["eval", "--checkpoint", "missing.ckpt", "--data", "missing.qgc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt"));
    std::fs::write(d.join("bad.json"), r#"{"batch_size": 0}"#).unwrap();
    assert!(qcnn(d, &["gen-data", "--out", "x.qgc", "--classes", "2", "--per-class", "2"]).status.success());
    assert_eq!(qcnn(d, &["train", "--data", "x.qgc", "--config", "bad.json", "--out", "m.ckpt"]).status.code(), Some(1));
    std::fs::write(d.join("typo.json"), r#"{"epoch": 3}"#).unwrap();
    assert_eq!(qcnn(d, &["train", "--data", "x.qgc", "--config", "typo.json", "--out", "m.ckpt"]).status.code(), Some(1));
    assert_eq!(qcnn(d, &["gen-data"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcnn(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["gen-data", "train", "eval", "experiment-matrix", "flip-experiment", "check-equivariance", "grad-check", "viz-kernels"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn viz_kernels_writes_json_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"model": "compact-qcnn", "epochs": 1}"#).unwrap();
    assert!(qcnn(d, &["gen-data", "--classes", "3", "--per-class", "6", "--out", "d.qgc"]).status.success());
    assert!(qcnn(d, &["train", "--data", "d.qgc", "--config", "cfg.json", "--out", "m.ckpt"]).status.success());
    let o = qcnn(
        d,
        &["viz-kernels", "--checkpoint", "m.ckpt", "--data", "d.qgc", "--steps", "50", "--channels", "0,2", "--out", "v.json", "--svg", "v.svg"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("v.json")).unwrap()).unwrap();
    assert_eq!(doc["checkpoint"], "m.ckpt");
    assert_eq!(doc["fragments"].as_array().unwrap().len(), 2);
    assert_eq!(doc["fragments"][1]["kernel"]["out_channel"], 2);
    assert_eq!(doc["traces"][0]["outputs"].as_array().unwrap().len(), 100);
    assert!(std::fs::read_to_string(d.join("v.svg")).unwrap().starts_with("<svg"));

    // qconv layer 2 has 4 input channels
    let o = qcnn(d, &["viz-kernels", "--checkpoint", "m.ckpt", "--layer", "2", "--out", "w.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("input channels"));
}
