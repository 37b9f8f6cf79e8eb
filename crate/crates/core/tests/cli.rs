use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use alma_core::metrics::parse_csv;

fn alma(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alma"))
        .args(args)
        .env("ALMA_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, extra: Value) -> String {
    let mut cfg = json!({
        "dataset": "synthetic",
        "synthetic_classes": 3,
        "synthetic_dim": 5,
        "synthetic_train": 300,
        "synthetic_test": 90,
        "mega_batches": 6,
        "waiting_time": 2,
        "hidden": [6],
        "epochs_per_event": 2,
        "minibatch_size": 16,
        "output_dir": name,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn run_report_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, "gmoe", json!({"learner": "gmoe", "moe_layers": [0]}));
    let summary = stdout_json(&alma(&["run", &cfg], root));
    let run_dir = root.join("gmoe");
    for f in ["ledger.csv", "summary.json", "run.json", "final.ckpt"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, on_disk);

    let report = stdout_json(&alma(&["report", run_dir.to_str().unwrap(), "/nonexistent/run"], root));
    assert_eq!(report["runs"][0]["summary"], on_disk);
    assert_eq!(report["runs"][0]["curves"]["error_rate"].as_array().unwrap().len(), 6);
    assert_eq!(report["incomplete"].as_array().unwrap().len(), 1);

    let info = stdout_json(&alma(&["inspect", run_dir.join("final.ckpt").to_str().unwrap()], root));
    assert_eq!(info["learner"], "gmoe");
    // one growth per training event
    assert_eq!(info["components"][0]["layers"][0]["experts"], 4);
}

#[test]
fn tardy_run_trains_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tardy", json!({"waiting_time": 6}));
    let s = stdout_json(&alma(&["run", &cfg], tmp.path()));
    let rows = parse_csv(&std::fs::read_to_string(tmp.path().join("tardy/ledger.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().filter(|r| r.trained).count(), 1);
    assert!(rows[5].trained);
    let e0 = rows[0].error_rate;
    assert!(rows[..5].iter().all(|r| r.error_rate == e0 && r.flops == 0.0));
    let expect = 5.0 * e0 + rows[5].error_rate;
    assert!((s["cer"].as_f64().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn identical_runs_and_resume_match() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let extra = json!({"learner": "ens", "components": 2, "replay": true});
    let a = write_config(root, "a", extra.clone());
    let b = write_config(root, "b", extra);
    stdout_json(&alma(&["run", &a], root));
    let stopped = alma(&["run", &b, "--stop-after", "3"], root);
    assert!(stopped.status.success());
    assert!(!root.join("b/summary.json").exists());
    assert!(root.join("b/checkpoint.ckpt").is_file());
    stdout_json(&alma(&["run", &b, "--resume"], root));
    for f in ["ledger.csv", "summary.json", "final.ckpt"] {
        assert_eq!(std::fs::read(root.join("a").join(f)).unwrap(), std::fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_balances_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ab", json!({}));
    let out = stdout_json(&alma(&["ablate-seq", &cfg, "--k", "3"], tmp.path()));
    assert_eq!(out["seq_examples"], out["iid_examples"]);
    assert!(tmp.path().join("ab/seq/ledger.csv").is_file());
    assert!(tmp.path().join("ab/iid/ledger.csv").is_file());

    let k1 = stdout_json(&alma(&["ablate-seq", &cfg, "--k", "1"], tmp.path()));
    assert_eq!(k1["seq"], k1["iid"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(alma(&["run", bad.to_str().unwrap()], root).status.code(), Some(2));

    let cfg = write_config(root, "k", json!({}));
    assert_eq!(alma(&["ablate-seq", &cfg, "--k", "4"], root).status.code(), Some(2));

    let blowup = write_config(root, "nan", json!({"optimizer": "sgd", "lr": 1e300, "momentum": 0.0}));
    assert_eq!(alma(&["run", &blowup], root).status.code(), Some(3));
    let abort: Value = serde_json::from_str(&std::fs::read_to_string(root.join("nan/abort.json")).unwrap()).unwrap();
    assert_eq!(abort["error"], "numeric");
    assert!(root.join("nan/ledger.csv").is_file());

    let junk = root.join("junk.ckpt");
    std::fs::write(&junk, b"NOPE").unwrap();
    assert_eq!(alma(&["inspect", junk.to_str().unwrap()], root).status.code(), Some(1));
}
