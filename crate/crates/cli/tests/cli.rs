use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn scopeqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scopeqa"))
        .args(args)
        .env_remove("SCOPEQA_SEED")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = scopeqa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two small references, synthesized with pseudo-mos, plus a tiny fdc and
/// fqp trained for one epoch each.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok_json(&["refs", "--out", p(&f.path("refs")), "--count", "2", "--width", "24", "--height", "24", "--frames", "5"]);
        ok_json(&["synth", "--refs", p(&f.path("refs")), "--out", p(&f.path("data")), "--pseudo-mos"]);
        let manifest = f.path("data/manifest.json");
        let tiny = ["--epochs", "1", "--nf", "3", "--channels", "4", "--blocks", "1", "--crop", "24"];
        let fdc_dir = f.path("fdc");
        let mut args = vec!["train", "fdc", "--manifest", p(&manifest), "--out", p(&fdc_dir)];
        args.extend(tiny);
        ok_json(&args);
        ok_json(&[
            "train", "fqp", "--manifest", p(&manifest), "--out", p(&f.path("fqp")), "--init",
            p(&f.path("fdc/model.sqa")), "--epochs", "1", "--nf", "3",
        ]);
        f
    })
}

#[test]
fn synth_is_deterministic() {
    let f = fixture();
    let again = tempfile::tempdir().unwrap();
    ok_json(&["synth", "--refs", p(&f.path("refs")), "--out", p(again.path()), "--pseudo-mos"]);
    let a = std::fs::read(f.path("data/manifest.json")).unwrap();
    let b = std::fs::read(again.path().join("manifest.json")).unwrap();
    let (a, b): (Value, Value) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.as_array().unwrap().len(), 40);
    let clip = "ref0_WN_VA/frame_002.png";
    let (x, y) = (std::fs::read(f.path("data").join(clip)), std::fs::read(again.path().join(clip)));
    assert_eq!(x.unwrap(), y.unwrap());
}

#[test]
fn training_writes_checkpoint_and_log() {
    let f = fixture();
    assert!(f.path("fdc/model.sqa").is_file());
    let log = std::fs::read_to_string(f.path("fdc/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
}

#[test]
fn video_training_requires_frame_quality_checkpoint() {
    let f = fixture();
    let manifest = f.path("data/manifest.json");
    let out = scopeqa(&["train", "vqp-tl", "--manifest", p(&manifest), "--out", p(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("E_PRECOND"), "{err}");
    assert!(err.contains("fqp"), "{err}");
    // a classifier is the wrong kind of starting point
    let out = scopeqa(&[
        "train", "vqp-e2e", "--manifest", p(&manifest), "--out", p(&f.path("x")), "--init",
        p(&f.path("fdc/model.sqa")),
    ]);
    assert!(stderr(&out).starts_with("E_PRECOND"));
    assert!(!f.path("x").exists());
}

#[test]
fn corrupt_checkpoint_fails_cleanly() {
    let f = fixture();
    let bad = f.dir.path().join("corrupt.sqa");
    let mut bytes = std::fs::read(f.path("fqp/model.sqa")).unwrap();
    bytes.truncate(bytes.len() / 3);
    std::fs::write(&bad, bytes).unwrap();
    let out = scopeqa(&["predict", p(&f.path("data/ref0_DB_HV")), "--checkpoint", p(&bad)]);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(stderr(&out).lines().count(), 1);
}

#[test]
fn predict_reports_class_and_scores() {
    let f = fixture();
    let v = ok_json(&[
        "predict", p(&f.path("data/ref1_SM_EA")), "--checkpoint", p(&f.path("fdc/model.sqa")), "--checkpoint",
        p(&f.path("fqp/model.sqa")), "--nf", "3", "--pooling", "median",
    ]);
    assert_eq!(v["frame_scores"].as_array().unwrap().len(), 3);
    assert!(v["class"].as_u64().unwrap() < 20);
    assert!(v["class_name"].is_string());
    let scores: Vec<f64> = v["frame_scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    assert!((v["video_score"].as_f64().unwrap() - sorted[1]).abs() < 1e-6);
}

#[test]
fn fcnn_pooling_needs_video_network() {
    let f = fixture();
    let out = scopeqa(&[
        "predict", p(&f.path("data/ref0_DB_HV")), "--checkpoint", p(&f.path("fqp/model.sqa")), "--pooling", "fcnn",
    ]);
    assert!(stderr(&out).starts_with("E_PRECOND"));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let f = fixture();
    let ck = f.dir.path().join("oracle.sqa");
    ok_json(&["oracle", "--out", p(&ck)]);
    let out = f.dir.path().join("oracle_eval");
    let v = ok_json(&["evaluate", "--checkpoint", p(&ck), "--manifest", p(&f.path("data/manifest.json")), "--out", p(&out)]);
    for k in ["plcc", "srocc", "krocc"] {
        assert!((v[k].as_f64().unwrap() - 1.0).abs() < 1e-9, "{k} {v}");
    }
    for file in ["report.json", "clips.csv", "scatter.svg"] {
        assert!(out.join(file).is_file(), "{file}");
    }
}

#[test]
fn evaluate_classifier_writes_confusion() {
    let f = fixture();
    let out = f.dir.path().join("fdc_eval");
    let v = ok_json(&[
        "evaluate", "--checkpoint", p(&f.path("fdc/model.sqa")), "--manifest", p(&f.path("data/manifest.json")),
        "--out", p(&out), "--nf", "3", "--format", "csv",
    ]);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("confusion.csv").is_file());
    assert!(!out.join("report.json").exists());
}

#[test]
fn evaluate_fqp_with_median_pooling() {
    let f = fixture();
    let out = f.dir.path().join("fqp_eval");
    let v = ok_json(&[
        "evaluate", "--checkpoint", p(&f.path("fqp/model.sqa")), "--manifest", p(&f.path("data/manifest.json")),
        "--out", p(&out), "--nf", "3", "--pooling", "median",
    ]);
    assert!(v["srocc"].as_f64().unwrap().abs() <= 1.0);
}

#[test]
fn missing_inputs_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scopeqa(&["synth", "--refs", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("E_IO"), "{}", stderr(&out));
    let out = scopeqa(&["train", "fdc"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("E_PRECOND"));
    assert!(scopeqa(&["--help"]).status.success());
}
