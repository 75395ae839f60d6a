//! CLI contract: config validation, exit codes, output schemas and
//! run-to-run determinism of the emitted artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_separatrix"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn theta_closed_form_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" }, "z": [[1.0]] }"#,
    );
    let out = bin()
        .args(["theta", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("theta.json")).unwrap()).unwrap();
    let theta = v["theta"].as_array().unwrap();
    let qe = v["quad_error"].as_f64().unwrap();
    assert!((theta[0].as_f64().unwrap() - 2.0).abs() <= qe.max(1e-8));
    assert!((theta[2].as_f64().unwrap() - 4.0).abs() <= 2.0 * qe.max(1e-8));
    assert!((v["P"][0].as_f64().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" }, "base_point": {"p": 0.77, "q": 0.0, "z": [1.0]},
            "delta": 0.05, "eps": 1e-3, "n": -5, "seed": 1, "t_span": 10.0 }"#,
    );
    let outdir = dir.path().join("out");
    fs::create_dir(&outdir).unwrap();
    let out = bin()
        .args(["ensemble", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&outdir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("exit_code"), "structured diagnostics expected: {stderr}");
    assert_eq!(fs::read_dir(&outdir).unwrap().count(), 0, "no artifacts on config error");

    // unknown keys are rejected too
    write(&cfg, r#"{ "model": { "preset": "dw-slow" }, "z": [[1.0]], "bogus": 1 }"#);
    let out = bin()
        .args(["theta", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&outdir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" },
            "initial": { "p": 100.0, "q": 0.0, "z": [1.0] },
            "eps": 1e-3, "t_span": 10.0 }"#,
    );
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trajectory_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // dim_z = 1: z columns present
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" },
            "initial": { "p": 0.8, "q": 0.1, "z": [1.0] },
            "eps": 0.0, "t_span": 5.0 }"#,
    );
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,p,q,z0,h,nu");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 6);
    // emitted floats parse back exactly (17 significant digits)
    let p: f64 = first[1].parse().unwrap();
    assert_eq!(p, 0.8);
    assert!(csv.ends_with('\n'));

    // dim_z = 0: z columns absent
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-dissip" },
            "initial": { "p": 0.8, "q": 0.1 },
            "eps": 0.0, "t_span": 5.0 }"#,
    );
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,p,q,h,nu");
}

#[test]
fn geometry_csv_and_empty_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" }, "z": [[1.0]], "h": [-0.05, 0.05] }"#,
    );
    let out = bin()
        .args(["geometry", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("geometry.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "z0,nu,h,T,I,S_nu");
    // h < 0 rows appear for both loops, h > 0 for the outer region
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(dir.path().join("loop_z0_nu1.csv").exists());
    assert!(dir.path().join("loop_z0_nu2.csv").exists());

    // energies below the well bottom yield an empty (header-only) series
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow" }, "z": [[1.0]], "h": [-5.0] }"#,
    );
    let out = bin()
        .args(["geometry", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("geometry.csv")).unwrap();
    assert_eq!(csv, "z0,nu,h,T,I,S_nu\n");
}

#[test]
fn averaged_crossing_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-dissip", "params": { "gamma": 0.2 } },
            "h0": 0.3, "eps": 1e-3, "tau_max": 6.0 }"#,
    );
    let out = bin()
        .args(["averaged", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("crossing.json")).unwrap())
            .unwrap();
    // frozen reference integration: tau_* = 3.699474592247
    let tau = v["tau_star"].as_f64().unwrap();
    assert!((tau - 3.699474592247).abs() < 5e-6, "tau_* = {tau}");
    assert!((v["P1"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let csv = fs::read_to_string(dir.path().join("averaged.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "tau,nu,H,J");
}

#[test]
fn ensemble_reports_are_byte_identical_under_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{ "model": { "preset": "dw-slow", "params": { "gamma": 0.2 } },
            "base_point": { "p": 0.7745966692414834, "q": 0.0, "z": [1.0] },
            "delta": 0.05, "eps": 2e-3, "n": 16, "seed": 4242,
            "t_span": 1e6, "tau_max": 0.9 }"#,
    );
    let run = |sub: &str| -> (Vec<u8>, Vec<u8>) {
        let out_dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args([sub, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            fs::read(out_dir.path().join("ensemble.json")).unwrap(),
            fs::read(out_dir.path().join("trajectories.csv")).unwrap(),
        )
    };
    let (j1, c1) = run("ensemble");
    let (j2, c2) = run("ensemble");
    assert_eq!(j1, j2, "ensemble.json must be byte-identical");
    assert_eq!(c1, c2, "trajectories.csv must be byte-identical");
    let text = String::from_utf8(c1).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "id,destination,t_minus,t_plus,h_prime,predicted,pre_err,post_err"
    );
    // --seed overrides the config seed
    let out_dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ensemble", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(out_dir.path())
        .args(["--seed", "77"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let j3 = fs::read(out_dir.path().join("ensemble.json")).unwrap();
    assert_ne!(j1, j3, "a different seed must change the report");
}
