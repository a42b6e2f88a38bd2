use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn whiteout(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whiteout"))
        .current_dir(dir)
        .env_remove("WHITEOUT_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = whiteout(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_matrix(path: &Path, d: usize, f: impl Fn(usize, usize) -> f64) {
    let body: String = (0..d)
        .map(|i| (0..d).map(|j| f(i, j).to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

fn write_vector(path: &Path, v: &[f64]) {
    fs::write(path, v.iter().map(|x| format!("{x}\n")).collect::<String>()).unwrap();
}

fn rejections(v: &Value) -> Vec<u64> {
    v["results"][0]["rejections"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()
}

/// Identity Σ, Δ = 2I, five coefficients of 8 plus small fixed noise.
fn identity_setup(dir: &Path) {
    let d = 20;
    write_matrix(&dir.join("sigma.csv"), d, |i, j| if i == j { 1.0 } else { 0.0 });
    let noise = [0.3, -0.5, 0.1, 0.7, -0.2, 0.4, -0.9, 0.2, 0.6, -0.1, 0.8, -0.4, 0.5, -0.7, 0.0, 0.3, -0.3, 0.9, -0.6, 0.1];
    let beta: Vec<f64> = (0..d).map(|j| if j < 5 { 8.0 } else { 0.0 }).collect();
    let beta_hat: Vec<f64> = (0..d).map(|j| beta[j] + noise[j]).collect();
    write_vector(&dir.join("beta.txt"), &beta);
    write_vector(&dir.join("beta_hat.txt"), &beta_hat);
    write_vector(&dir.join("delta.txt"), &[2.0; 20]);
}

#[test]
fn constants_match_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(dir.path(), &["constants", "--alpha", "0.05"]);
    let c = &v[0];
    assert!((c["c1"].as_f64().unwrap() - 2.29489).abs() < 1e-4);
    assert!((c["c2"].as_f64().unwrap() - 39.8101).abs() < 1e-3);
    assert!((c["c3"].as_f64().unwrap() - 1.04153).abs() < 1e-4);
}

#[test]
fn filter_finds_strong_signals_on_identity() {
    let dir = tempfile::tempdir().unwrap();
    identity_setup(dir.path());
    for strategy in [&["--strategy", "lasso"][..], &["--strategy", "oracle", "--beta", "beta.txt"][..]] {
        let mut args = vec![
            "filter", "--beta-hat", "beta_hat.txt", "--sigma", "sigma.csv", "--sigma2", "1", "--delta", "file:delta.txt",
            "--alpha", "0.2", "--out", "out",
        ];
        args.extend_from_slice(strategy);
        let v = ok_json(dir.path(), &args);
        assert_eq!(rejections(&v), vec![1, 2, 3, 4, 5], "{strategy:?}");
        assert_eq!(v["diagnostics"]["large_delta_warning"], false);
    }
    let csv = fs::read_to_string(dir.path().join("out/filter_alpha-0.2.csv")).unwrap();
    assert!(csv.starts_with("rank,index,W,W_star,psi,p_tilde,rejected,eta_if_oracle\n"));
    assert_eq!(csv.lines().count(), 21);
    let seq = fs::read_to_string(dir.path().join("out/seqstep_alpha-0.2.csv")).unwrap();
    assert_eq!(seq.lines().filter(|l| l.ends_with(",true")).count(), 5);
}

#[test]
fn filter_on_mcc_warns_and_rejects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = 200;
    write_matrix(&dir.path().join("sigma.csv"), d, |i, j| if i == j { 1.0 } else { 0.5 });
    let beta_hat: Vec<f64> = (0..d).map(|j| if j < 10 { 4.0 } else { 0.1 * ((j % 7) as f64 - 3.0) }).collect();
    write_vector(&dir.path().join("beta_hat.txt"), &beta_hat);
    let v = ok_json(
        dir.path(),
        &["filter", "--beta-hat", "beta_hat.txt", "--sigma", "sigma.csv", "--sigma2", "1", "--alpha", "0.2"],
    );
    assert!(rejections(&v).is_empty());
    assert_eq!(v["diagnostics"]["large_delta_warning"], true);
    assert_eq!(v["diagnostics"]["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn malformed_csv_reports_the_row() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "1,0\n0,x\n").unwrap();
    let out = whiteout(dir.path(), &["diagnose", "--sigma", "bad.csv", "--out", "out"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "parse");
    assert_eq!(err["row"], 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_alpha_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = whiteout(dir.path(), &["constants", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    identity_setup(dir.path());
    fs::write(
        dir.path().join("sim.json"),
        r#"{"scenario": {"family": "equicorrelated", "d": 30, "rho": 0.2, "d1": 5, "beta0": 4.0, "seed": 3}, "replicates": 12}"#,
    )
    .unwrap();
    let runs = [
        vec!["simulate", "--config", "sim.json"],
        vec!["filter", "--beta-hat", "beta_hat.txt", "--sigma", "sigma.csv", "--sigma2", "1", "--delta", "file:delta.txt"],
    ];
    for args in runs {
        let mut files = Vec::new();
        for threads in ["1", "4"] {
            let out = format!("out-{threads}");
            let mut a = args.clone();
            a.extend_from_slice(&["--threads", threads, "--out", &out]);
            ok_json(dir.path(), &a);
            let mut names: Vec<_> = fs::read_dir(dir.path().join(&out)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            files.push(names.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(files[0], files[1], "{args:?}");
        let _ = fs::remove_dir_all(dir.path().join("out-1"));
        let _ = fs::remove_dir_all(dir.path().join("out-4"));
    }
}

#[test]
fn diagnose_separates_identity_from_mcc() {
    let dir = tempfile::tempdir().unwrap();
    write_matrix(&dir.path().join("id.csv"), 50, |i, j| if i == j { 1.0 } else { 0.0 });
    write_matrix(&dir.path().join("mcc.csv"), 50, |i, j| if i == j { 1.0 } else { 0.5 });
    let id = ok_json(dir.path(), &["diagnose", "--sigma", "id.csv"]);
    assert_eq!(id["verdict"], "knockoffs viable");
    let mcc = ok_json(dir.path(), &["diagnose", "--sigma", "mcc.csv", "--out", "out"]);
    assert_eq!(mcc["verdict"], "whiteout warning");
    // λ₁ = 1 + 0.5·49.
    assert!((mcc["lambda1"].as_f64().unwrap() - 25.5).abs() < 1e-9);
    let csv = fs::read_to_string(dir.path().join("out/diagnose.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn simulate_writes_summary_and_replicates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"scenario": {"family": "equicorrelated", "d": 30, "rho": 0.2, "d1": 5, "beta0": 4.0, "seed": 3},
            "replicates": 10, "methods": ["bh", "bonferroni"]}"#,
    )
    .unwrap();
    let v = ok_json(dir.path(), &["simulate", "--config", "sim.json", "--alpha", "0.1", "--out", "out"]);
    assert_eq!(v["summary"]["entries"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(dir.path().join("out/replicates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 2);

    fs::write(dir.path().join("typo.json"), r#"{"scenario": {"family": "identity", "d": 5}, "replicats": 3}"#).unwrap();
    let out = whiteout(dir.path(), &["simulate", "--config", "typo.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn t3_and_bounds_run_on_a_scenario() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("scenario.json"),
        r#"{"family": "mcc", "d": 1000, "rho": 0.5, "d1": 20, "beta0": 3.0, "seed": 1}"#,
    )
    .unwrap();
    let t3 = ok_json(dir.path(), &["t3", "--config", "scenario.json", "--replicates", "200", "--alpha", "0.1", "--out", "out"]);
    let est = &t3["results"][0]["estimate"];
    let tpr = est["tpr"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tpr));
    assert!(dir.path().join("out/histogram_alpha-0.1.csv").exists());

    let b = ok_json(dir.path(), &["bounds", "--config", "scenario.json", "--alpha", "0.1"]);
    let r = &b["results"][0];
    assert!(r["main_k"]["ceiling"].as_f64().unwrap() > 0.0);
    assert!(r["random_k"].is_null());

    write_vector(&dir.path().join("mu.txt"), &[50.0, 50.0, 50.0, 0.0, 0.0]);
    let h = ok_json(dir.path(), &["t3", "--mu", "mu.txt", "--replicates", "100", "--alpha", "0.2"]);
    assert!(h["results"][0]["rejections"]["mean"].as_f64().unwrap() > 0.0);
}
