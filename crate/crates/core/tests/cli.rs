use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rfmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfmi")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mixture() -> Value {
    json!({"family": "gaussian-mixture-label", "means": [[-1.0], [1.0]], "variance": 1.0})
}

fn tiny_train(task: Value) -> Value {
    json!({
        "format_version": 1,
        "task": task,
        "n_train": 500,
        "arch": {"hidden_layers": 1, "width": 8, "activation": "tanh", "embed_dim": 2},
        "train": {"iterations": 40, "batch_size": 32, "warmup_steps": 4}
    })
}

#[test]
fn missing_field_exits_with_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &json!({"format_version": 1}));
    let out = rfmi(&["train", "--config", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`task`"));
}

#[test]
fn unknown_field_and_version_mismatch_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_train(mixture());
    v["extra"] = json!(1);
    let cfg = write(dir.path(), "a.json", &v);
    assert_eq!(rfmi(&["train", "--config", &cfg, "--out", s(&dir.path().join("o"))]).status.code(), Some(2));
    let mut v = tiny_train(mixture());
    v["format_version"] = json!(2);
    let cfg = write(dir.path(), "b.json", &v);
    let out = rfmi(&["train", "--config", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format_version"));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_train(json!({"family": "correlated-gaussian", "rho": [0.5]}));
    v["arch"]["activation"] = json!("relu");
    v["train"]["optimizer"] = json!({"lr": 1e6, "clip_norm": null});
    v["train"]["warmup_steps"] = json!(0);
    let cfg = write(dir.path(), "c.json", &v);
    let out = rfmi(&["train", "--config", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn retraining_gives_a_byte_identical_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny_train(mixture()));
    for name in ["a", "b"] {
        let out = rfmi(&["train", "--config", &cfg, "--seed", "4", "--out", s(&dir.path().join(name))]);
        assert!(out.status.success());
    }
    let a = fs::read(dir.path().join("a/model.json")).unwrap();
    let b = fs::read(dir.path().join("b/model.json")).unwrap();
    assert_eq!(a, b);
    let log = fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss,lr,wall_time_s"));
    assert_eq!(log.lines().count(), 41);
}

#[test]
fn mode_flag_sets_the_record_tag() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "t.json", &tiny_train(mixture()));
    assert!(rfmi(&["train", "--config", &train, "--out", s(&dir.path().join("t"))]).status.success());
    let est = write(
        dir.path(),
        "e.json",
        &json!({
            "format_version": 1,
            "task": mixture(),
            "model": s(&dir.path().join("t/model.json")),
            "estimate": {"n_y": 10, "n_t": 4, "n_x": 2, "steps": 8}
        }),
    );
    for (mode, tag) in [("data-coupled", "rfmi-data-coupled"), ("trajectory", "rfmi-trajectory")] {
        let out_dir = dir.path().join(mode);
        let out = rfmi(&["estimate", "--config", &est, "--mode", mode, "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let rec: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("estimate.json")).unwrap()).unwrap();
        assert_eq!(rec["estimator_tag"], tag);
        let snap: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap()).unwrap();
        assert_eq!(snap["estimate"]["mode"], mode);
    }
}

#[test]
fn oracle_estimate_on_an_independent_task_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let est = write(
        dir.path(),
        "e.json",
        &json!({
            "format_version": 1,
            "task": {"family": "correlated-gaussian", "rho": [0.0]},
            "estimate": {"n_y": 200}
        }),
    );
    let out = rfmi(&["estimate", "--config", &est, "--out", s(&dir.path().join("o"))]);
    assert!(out.status.success());
    let rec: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/estimate.json")).unwrap()).unwrap();
    assert_eq!(rec["estimator_tag"], "rfmi-oracle");
    assert!(rec["value"].as_f64().unwrap().abs() < 0.05);
}

#[test]
fn corrupt_model_file_is_a_version_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    fs::write(&model, r#"{"format_version": 99}"#).unwrap();
    let est = write(
        dir.path(),
        "e.json",
        &json!({"format_version": 1, "task": mixture(), "model": s(&model)}),
    );
    let out = rfmi(&["estimate", "--config", &est, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn benchmark_rows_bias_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.json",
        &json!({
            "format_version": 1,
            "tasks": [
                {"task_id": "g0", "spec": {"family": "correlated-gaussian", "rho": [0.0]}},
                {"task_id": "g5", "spec": {"family": "correlated-gaussian", "rho": [0.5]}}
            ],
            "bench": {
                "n_train": 500,
                "arch": {"hidden_layers": 1, "width": 8, "activation": "tanh", "embed_dim": 2},
                "train": {"iterations": 30, "batch_size": 32, "warmup_steps": 3},
                "estimate": {"n_y": 10, "n_t": 4, "n_x": 2, "steps": 8},
                "infonce": {"steps": 10, "batch_k": 16, "width": 8, "n_train": 200, "n_test": 32}
            }
        }),
    );
    let out_dir = dir.path().join("o");
    let out = rfmi(&["benchmark", "--config", &cfg, "--workers", "2", "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    // One row per (task, estimator) cell.
    assert_eq!(rows.len(), 2 * 3);
    for r in rows {
        let bias = r["bias"].as_f64().unwrap();
        assert_eq!(bias, r["estimate"].as_f64().unwrap() - r["true_mi"].as_f64().unwrap());
    }
    let heat = fs::read_to_string(out_dir.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 3);

    let summary_dir = dir.path().join("summary");
    let out = rfmi(&["report", "--input", s(&out_dir.join("report.json")), "--out", s(&summary_dir)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("g5"));
    assert_eq!(fs::read_to_string(summary_dir.join("heatmap.csv")).unwrap(), heat);
}

#[test]
fn finetune_rejects_k_above_m_and_reports_gain() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "t.json", &tiny_train(mixture()));
    assert!(rfmi(&["train", "--config", &train, "--out", s(&dir.path().join("t"))]).status.success());
    let model = dir.path().join("t/model.json");
    let base = json!({
        "format_version": 1,
        "model": s(&model),
        "task": mixture(),
        "pipeline": {
            "prompts_per_label": 2,
            "selection": {"m": 4, "k": 1, "pointwise": {"steps": 5}},
            "finetune": {"iterations": 10, "batch_size": 4, "warmup_steps": 1},
            "alignment": {"n_per_label": 20, "steps": 5}
        }
    });
    let mut bad = base.clone();
    bad["pipeline"]["selection"]["k"] = json!(5);
    let cfg = write(dir.path(), "bad.json", &bad);
    let out_bad = dir.path().join("bad");
    assert_eq!(rfmi(&["finetune", "--config", &cfg, "--out", s(&out_bad)]).status.code(), Some(2));
    assert!(!out_bad.join("finetune_set.json").exists());

    let cfg = write(dir.path(), "ok.json", &base);
    let out_dir = dir.path().join("ok");
    let out = rfmi(&["finetune", "--config", &cfg, "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("alignment.json")).unwrap()).unwrap();
    let (before, after) = (summary["before"].as_f64().unwrap(), summary["after"].as_f64().unwrap());
    assert_eq!(summary["relative_gain_pct"].as_f64().unwrap(), 100.0 * (after - before) / before);
    let set: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("finetune_set.json")).unwrap()).unwrap();
    // Two labels, two prompts each, two passes, one kept per pool.
    assert_eq!(set["pools"].as_array().unwrap().len(), 8);
}
