use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

const CATEGORICAL: &str = r#"{ "name": "cat", "scenario": { "kind": "categorical" }, "seed": 2, "partitions": "rows:2" }"#;

#[test]
fn simulate_writes_reproducible_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CATEGORICAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = lgm(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["dataset.csv", "truth.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = tmp.path().join("c");
    lgm(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(a.join("dataset.csv")).unwrap(), std::fs::read(c.join("dataset.csv")).unwrap());
}

#[test]
fn compare_writes_a_valid_report_and_method_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CATEGORICAL);
    let out = tmp.path().join("out");
    let o = lgm(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--partitions", "random:3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    lgm_harness::experiment::validate_report_json(&report).unwrap();
    assert_eq!(report["partitions"], "random:3");
    assert_eq!(report["n_partitions"], 3);
    assert!(report["methods"]["full"]["peak_memory_bytes"].as_u64().unwrap() > 0);
    for m in ["full", "recursive", "consensus"] {
        assert_eq!(report["methods"][m]["status"], "ok");
        assert!(out.join(m).join("latent_marginals.csv").exists(), "{m}");
    }
    assert!(out.join("recursive").join("recursive_trace.csv").exists());
    assert!(out.join("consensus").join("partitions.json").exists());
}

#[test]
fn loaded_data_is_fitted_without_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CATEGORICAL);
    let sim = tmp.path().join("sim");
    lgm(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let cfg2 = tmp.path().join("loaded.json");
    std::fs::write(&cfg2, r#"{ "scenario": { "kind": "categorical" }, "methods": ["full"], "data": "sim/dataset.csv" }"#).unwrap();
    let out = tmp.path().join("fit");
    let o = lgm(&["fit", "--config", cfg2.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["truth"]["full"].is_null());
    assert!(report["methods"]["recursive"].is_null());
}

#[test]
fn oracle_writes_the_conjugate_posterior() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CATEGORICAL);
    let out = tmp.path().join("oracle");
    let o = lgm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(v["conjugate"]["mean"].as_array().unwrap().len(), 6);
    assert!(v["conjugate"]["log_evidence"].as_f64().unwrap().is_finite());

    let desk = write_config(tmp.path(), r#"{ "scenario": { "kind": "poisson_desk" }, "partitions": "time:1" }"#);
    let o = lgm(&["oracle", "--config", desk.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        r#"{ "scenario": { "kind": "categorical" }, "partitions": "weekly:3" }"#,
        r#"{ "scenario": { "kind": "categorical" } }"#,
        r#"{ "scenario": { "kind": "categorical", "tau_u": -1.0 }, "methods": ["full"] }"#,
        r#"{ "scenario": { "kind": "spatial_fusion" }, "methods": ["full"], "variant": "secondary_only" }"#,
        r#"{ "scenario": { "kind": "nowhere" } }"#,
        "not json",
    ];
    for body in cases {
        let cfg = write_config(tmp.path(), body);
        let o = lgm(&["compare", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = lgm(&["fit", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_code_three_after_writing_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("source,response,site,time,level,phi\n");
    for (s, y) in [1e300, -1e300, 1.0, 1.0].into_iter().enumerate() {
        csv.push_str(&format!("0,{y},{s},0,,\n"));
    }
    std::fs::write(tmp.path().join("data.csv"), csv).unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{ "scenario": { "kind": "spatiotemporal", "nrow": 2, "ncol": 2, "n_time": 2 }, "methods": ["full"], "data": "data.csv" }"#,
    );
    let out = tmp.path().join("o");
    let o = lgm(&["fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"]["full"]["status"], "failed");
}
