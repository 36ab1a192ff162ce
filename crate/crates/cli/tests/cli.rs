use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gmed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmed"))
        .args(args)
        .env_remove("GMED_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = gmed(args);
    assert!(
        out.status.success(),
        "gmed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_runtime(mut v: Value) -> Value {
    v["manifest"].as_object_mut().unwrap().remove("runtime");
    v
}

fn simulate(dir: &Path, extra: &[&str]) -> (String, String) {
    let out = dir.join("sim");
    let out_s = out.to_str().unwrap();
    let mut args = vec![
        "simulate", "--p", "4", "--n", "40", "--T", "30", "--seed", "1", "--out", out_s,
    ];
    args.extend_from_slice(extra);
    ok(&args);
    (
        out.join("subjects.csv").to_str().unwrap().to_string(),
        out.join("mediators").to_str().unwrap().to_string(),
    )
}

fn fit(subjects: &str, mediators: &str, out: &Path, threads: &str) -> Value {
    ok(&[
        "fit",
        "--subjects",
        subjects,
        "--mediators",
        mediators,
        "--max-components",
        "2",
        "--starts",
        "2",
        "--seed",
        "7",
        "--threads",
        threads,
        "--out",
        out.to_str().unwrap(),
    ]);
    read_json(out)
}

#[test]
fn simulate_sidecar_records_confounder_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let (subjects, _) = simulate(dir.path(), &["--sim", "2", "--misspecify"]);
    let truth = read_json(&dir.path().join("sim/truth.json"));
    assert_eq!(truth["phi1"], serde_json::json!([0.5, 0.5]));
    assert_eq!(truth["phi2"], serde_json::json!([0.5, 0.5]));
    assert_eq!(truth["misspecified"], Value::Bool(true));
    assert_eq!(truth["manifest"]["command"], "simulate");
    let header = std::fs::read_to_string(subjects).unwrap();
    assert_eq!(header.lines().next().unwrap(), "unit_id,exposure,outcome");
}

#[test]
fn fit_and_bootstrap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (subjects, mediators) = simulate(dir.path(), &[]);
    let result = fit(&subjects, &mediators, &dir.path().join("fit.json"), "1");
    let components = result["components"].as_array().unwrap();
    assert!(!components.is_empty() && components.len() <= 2);
    assert_eq!(result["dfd_trace"][0], 1.0);
    assert_eq!(
        result["manifest"]["inputs"][0]["sha256"]
            .as_str()
            .unwrap()
            .len(),
        64
    );

    // full precision: printing the parsed values reproduces the file text
    let theta: Vec<f64> = serde_json::from_value(components[0]["theta"].clone()).unwrap();
    let reparsed: Vec<f64> = serde_json::from_str(&serde_json::to_string(&theta).unwrap()).unwrap();
    assert_eq!(theta, reparsed);

    let boot_path = dir.path().join("boot.json");
    ok(&[
        "bootstrap",
        "--fit",
        dir.path().join("fit.json").to_str().unwrap(),
        "--B",
        "30",
        "--seed",
        "2",
        "--keep-draws",
        "--out",
        boot_path.to_str().unwrap(),
    ]);
    let boot = read_json(&boot_path);
    assert_eq!(boot["n_boot"], 30);
    for (c, comp) in boot["components"]
        .as_array()
        .unwrap()
        .iter()
        .zip(components)
    {
        let aie = c["summaries"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["name"] == "aie")
            .unwrap();
        assert_eq!(aie["estimate"], comp["estimates"]["aie"]);
        for d in c["draws"].as_array().unwrap() {
            let (ate, aie, ade) = (
                d["ate"].as_f64().unwrap(),
                d["aie"].as_f64().unwrap(),
                d["ade"].as_f64().unwrap(),
            );
            assert_eq!(ate, aie + ade);
        }
    }
}

#[test]
fn seeded_runs_match_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (subjects, mediators) = simulate(dir.path(), &[]);
    let one = fit(&subjects, &mediators, &dir.path().join("a.json"), "1");
    let again = fit(&subjects, &mediators, &dir.path().join("b.json"), "1");
    let many = fit(&subjects, &mediators, &dir.path().join("c.json"), "3");
    assert_eq!(without_runtime(one.clone()), without_runtime(again));
    assert_eq!(without_runtime(one), without_runtime(many));
}

#[test]
fn replicate_writes_metrics_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.csv");
    ok(&[
        "replicate",
        "--p",
        "4",
        "--n",
        "30",
        "--T",
        "20",
        "--reps",
        "2",
        "--starts",
        "1",
        "--max-components",
        "2",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let manifest: Value =
        serde_json::from_str(lines.next().unwrap().strip_prefix("# manifest: ").unwrap()).unwrap();
    assert_eq!(manifest["command"], "replicate");
    let rows: Vec<&str> = lines.skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("D2,") && rows[1].starts_with("D4,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = gmed(&[
        "fit",
        "--subjects",
        missing.to_str().unwrap(),
        "--mediators",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = gmed(&[
        "simulate",
        "--T",
        "0",
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let (subjects, mediators) = simulate(dir.path(), &[]);
    let fit_path = dir.path().join("fit.json");
    fit(&subjects, &mediators, &fit_path, "1");
    let out = gmed(&["bootstrap", "--fit", fit_path.to_str().unwrap(), "--B", "0"]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(gmed(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(gmed(&["--help"]).status.code(), Some(0));
}
