use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn fast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fast"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_error_line(o: &Output, code: &str) {
    let text = stderr(o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    assert!(lines[0].starts_with(&format!("error: {code}: ")), "{text}");
}

fn write(dir: &Path, name: &str, v: &Value) {
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

/// Small synthetic dataset on disk plus an experiment config over it.
fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "s.json",
        &json!({"bags_per_class": 4, "instances_per_bag": 40, "noise_sigma": 0.3, "seed": 3}),
    );
    let o = fast(
        d,
        &[
            "synth",
            "--config",
            "s.json",
            "--out",
            "data",
            "--test-bags-per-class",
            "2",
            "--prompt-noise",
            "0.2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    write(
        d,
        "e.json",
        &json!({
            "source": {
                "kind": "file",
                "manifest": "data/manifest.json",
                "test_manifest": "data/test/manifest.json",
                "prompts": "data/prompts.femb"
            },
            "bag_shots": [1, 2],
            "instance_shots": [4],
            "repeats": 2,
            "train": {"steps": 10},
            "variants": [{"name": "full"}, {"name": "cache", "cache_only": true}]
        }),
    );
    tmp
}

#[test]
fn synth_then_sweep_writes_run_files() {
    let tmp = workspace();
    let o = fast(tmp.path(), &["sweep", "--config", "e.json", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "record.json",
        "report.csv",
        "report.json",
        "plot_full.csv",
        "plot_cache.csv",
        "metadata.json",
    ] {
        assert!(tmp.path().join("run").join(f).exists(), "{f} missing");
    }
    let record: Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("run/record.json")).unwrap())
            .unwrap();
    assert_eq!(record["cells"].as_array().unwrap().len(), 4);
    for cell in record["cells"].as_array().unwrap() {
        assert!(cell["error"].is_null());
        let cache = &cell["results"][1]["report"];
        assert_eq!(cache["alpha"], 1.0);
    }
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let tmp = workspace();
    for out in ["a", "b"] {
        let o = fast(
            tmp.path(),
            &["sweep", "--config", "e.json", "--out", out, "--seed", "7"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["record.json", "report.csv", "report.json", "plot_full.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn sample_train_eval_chain() {
    let tmp = workspace();
    let d = tmp.path();
    let o = fast(
        d,
        &[
            "sample",
            "--config",
            "e.json",
            "--out",
            "s",
            "--bag-shot",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fast(
        d,
        &[
            "train",
            "--config",
            "e.json",
            "--out",
            "t",
            "--split",
            "s/split.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("t/model.fckp").exists());
    assert!(d.join("t/history.csv").exists());
    let o = fast(
        d,
        &[
            "eval",
            "--config",
            "e.json",
            "--out",
            "t",
            "--split",
            "s/split.json",
            "--checkpoint",
            "t/model.fckp",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value =
        serde_json::from_slice(&std::fs::read(d.join("t/eval.json")).unwrap()).unwrap();
    assert!(report["instance_auc"]["macro_mean"].as_f64().unwrap() > 0.5);
}

#[test]
fn eval_on_single_label_test_set_flags_undefined_auc() {
    let tmp = workspace();
    let d = tmp.path();
    let mut manifest: Value =
        serde_json::from_slice(&std::fs::read(d.join("data/test/manifest.json")).unwrap()).unwrap();
    let bags: Vec<Value> = manifest["bags"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|b| b["label"] == 0)
        .cloned()
        .collect();
    manifest["bags"] = Value::Array(bags);
    write(&d.join("data/test"), "one_label.json", &manifest);
    let mut cfg: Value = serde_json::from_slice(&std::fs::read(d.join("e.json")).unwrap()).unwrap();
    cfg["source"]["test_manifest"] = json!("data/test/one_label.json");
    write(d, "one.json", &cfg);

    let o = fast(d, &["train", "--config", "one.json", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fast(
        d,
        &[
            "eval",
            "--config",
            "one.json",
            "--out",
            "t",
            "--checkpoint",
            "t/model.fckp",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("undefined AUC"));
    let report: Value =
        serde_json::from_slice(&std::fs::read(d.join("t/eval.json")).unwrap()).unwrap();
    assert!(report["bag_auc"]["macro_mean"].is_null());
    assert_eq!(report["bag_auc"]["undefined"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let o = fast(tmp.path(), &["gradcheck", "--out", "g"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("g/gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = fast(tmp.path(), &["sweep", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_one_error_line(&o, "usage");
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = fast(tmp.path(), &["sweep", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_one_error_line(&o, "missing-file");
}

#[test]
fn unknown_report_format_fails() {
    let tmp = workspace();
    let o = fast(
        tmp.path(),
        &["report", "--config", "e.json", "--format", "xml"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_one_error_line(&o, "unknown");
}

#[test]
fn report_rerenders_a_record() {
    let tmp = workspace();
    let d = tmp.path();
    assert!(fast(d, &["sweep", "--config", "e.json", "--out", "run"])
        .status
        .success());
    let o = fast(
        d,
        &[
            "report",
            "--record",
            "run/record.json",
            "--format",
            "csv",
            "--out",
            "again",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.join("run/report.csv")).unwrap(),
        std::fs::read(d.join("again/report.csv")).unwrap()
    );
    assert!(!d.join("again/report.json").exists());
}
