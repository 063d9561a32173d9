//! Whole commands run in-process, from argument parsing to the files they
//! write.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use tempfile::TempDir;

use super::{execute, Exit};

fn moe_sim(args: &[&str]) -> Exit {
    execute(std::iter::once("moe-sim").chain(args.iter().copied()))
}

fn stderr(o: &Exit) -> String {
    o.message.clone().unwrap_or_default()
}

fn small_trace(dir: &Path) -> PathBuf {
    let path = dir.join("t.trace");
    let o = moe_sim(&[
        "gen-trace",
        "--count",
        "15",
        "--rate",
        "10",
        "--seed",
        "2",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", stderr(&o));
    path
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("c.toml");
    fs::write(&path, format!("max_iterations = 40\n{body}")).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Sorted key names of a JSON object.
fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort_unstable();
    k
}

// ─── gen-trace ────────────────────────────────────────────────────────────────

#[test]
fn gen_trace_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.trace");
    let b = tmp.path().join("b.trace");
    for p in [&a, &b] {
        let o = moe_sim(&[
            "gen-trace",
            "--count",
            "50",
            "--rate",
            "3",
            "--seed",
            "11",
            "-o",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0, "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let data_lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .count();
    assert_eq!(data_lines, 50);
}

#[test]
fn zero_rate_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x.trace");
    let o = moe_sim(&[
        "gen-trace",
        "--count",
        "5",
        "--rate",
        "0",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 2);
    assert!(stderr(&o).contains("rate"), "{}", stderr(&o));
    assert!(!out.exists());
}

// ─── simulate ─────────────────────────────────────────────────────────────────

#[test]
fn simulate_writes_summary_samples_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    let config = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = moe_sim(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", stderr(&o));
    let mut names: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "samples.csv", "summary.json"]);

    let summary = json(&out.join("summary.json"));
    let mut want = vec![
        "policy",
        "seed",
        "iterations",
        "layers",
        "sample_count",
        "total_latency_ms",
        "mean_forward_ms",
        "p50_forward_ms",
        "p95_forward_ms",
        "p99_forward_ms",
        "cost_serverless_mb_ms",
        "cost_serverful_mb_ms",
        "mean_replicas_per_layer",
        "per_layer_mean_replicas",
        "warm_replicas",
        "cold_replicas",
        "per_layer_accuracy",
        "mean_accuracy",
        "uniform_fallbacks",
        "lossy",
    ];
    want.sort_unstable();
    assert_eq!(keys(&summary), want);
    assert_eq!(summary["iterations"], 40);
    assert_eq!(summary["sample_count"], 320);

    let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("iteration,layer,policy,forward_ms,replicas,warm,cold")
    );
    assert_eq!(lines.count(), 320);

    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(
        manifest["outputs"],
        serde_json::json!(["summary.json", "samples.csv"])
    );
    assert_eq!(manifest["trace_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn identical_runs_have_identical_manifests() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    let config = write_config(tmp.path(), "seed = 4\n");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = moe_sim(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0, "{}", stderr(&o));
        fs::read(out.join("manifest.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn bad_config_values_are_named() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    for (body, key) in [
        ("cv_threshold = -1.0\n", "cv_threshold"),
        ("cv_treshold = 0.3\n", "cv_treshold"),
        ("prediction_distance = 8\n", "prediction_distance"),
    ] {
        let config = write_config(tmp.path(), body);
        let o = moe_sim(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
            "-o",
            tmp.path().join("never").to_str().unwrap(),
        ]);
        assert_eq!(o.code, 1, "{body}");
        let err = stderr(&o);
        assert!(
            err.starts_with("error:") && err.contains(key),
            "{body}: {err}"
        );
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
}

#[test]
fn infeasible_cluster_exits_nonzero() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    let config = write_config(
        tmp.path(),
        "policy = \"static\"\ngpu_mem_capacity_mb = 990.0\n",
    );
    let o = moe_sim(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "-o",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.code, 1);
    assert!(
        stderr(&o).contains("iteration 0, layer 0"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn missing_trace_is_reported() {
    let tmp = TempDir::new().unwrap();
    let o = moe_sim(&[
        "simulate",
        "--trace",
        tmp.path().join("nope").to_str().unwrap(),
    ]);
    assert_eq!(o.code, 1);
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

// ─── compare, sweep, report ───────────────────────────────────────────────────

#[test]
fn compare_writes_one_pair_per_policy() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    let config = write_config(tmp.path(), "");
    let out = tmp.path().join("cmp");
    let o = moe_sim(&[
        "compare",
        "--config",
        config.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--policies",
        "serverless,static",
        "--ablation",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", stderr(&o));
    for label in [
        "serverless",
        "static",
        "serverless-no_pred-no_scale-no_place",
    ] {
        assert!(
            out.join(format!("{label}.summary.json")).exists(),
            "{label}"
        );
        assert!(out.join(format!("{label}.samples.csv")).exists(), "{label}");
    }
    let cdf = fs::read_to_string(out.join("cdf.csv")).unwrap();
    assert_eq!(cdf.lines().count(), 1 + 3 * 101);
    let cmp = json(&out.join("comparison.json"));
    assert_eq!(cmp["reports"].as_array().unwrap().len(), 3);

    let r = moe_sim(&["report", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", stderr(&r));
}

#[test]
fn sweep_has_one_row_per_grid_value() {
    let tmp = TempDir::new().unwrap();
    let trace = small_trace(tmp.path());
    let config = write_config(tmp.path(), "");
    let out = tmp.path().join("sw");
    let o = moe_sim(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--param",
        "cv",
        "--from",
        "0.2",
        "--to",
        "1.0",
        "--step",
        "0.2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("param,value,mean_forward_ms,mean_replicas_per_layer,total_latency_ms")
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("cv_threshold,0.2,"), "{}", rows[0]);
}

#[test]
fn oracle_check_writes_its_report() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("oc");
    let o = moe_sim(&[
        "oracle-check",
        "--instances",
        "20",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", stderr(&o));
    let report = json(&out.join("oracle_check.json"));
    assert_eq!(report["dominance_violations"], 0);
    assert_eq!(report["results"].as_array().unwrap().len(), 20);
}
