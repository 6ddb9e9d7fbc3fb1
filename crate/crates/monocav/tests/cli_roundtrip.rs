//! Drives the compiled binary end to end: exit codes, artifact shape, and
//! byte-for-byte reproducibility of reruns.

use serde_json::json;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monocav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn base_config() -> serde_json::Value {
    json!({
        "domain": { "lx": 1.0, "ly": 1.0, "nx": 16, "ny": 16, "sigma": [0.0, 0.5] },
        "cavity": { "kind": "disc", "center": [0.5, 0.5], "radius": 0.2 },
        "model": { "kind": "aliev_panfilov", "A": 8.0, "a": 0.15, "eps": 0.01, "gamma": 0.5 },
        "initial": { "kind": "collar_bump", "amplitude": 0.5, "width": 0.15 },
        "solver": { "dt": 0.05, "T": 0.5 }
    })
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn config_error_names_the_violated_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["model"]["a"] = json!(1.5);
    let cfg_path = dir.path().join("bad.json");
    write_json(&cfg_path, &cfg);

    let out = run(&[
        "forward",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("(0,1)"), "stderr: {stderr}");
    assert!(stderr.contains("1.5"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["mystery"] = json!(true);
    let cfg_path = dir.path().join("unknown.json");
    write_json(&cfg_path, &cfg);

    let out = run(&[
        "forward",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn forward_artifacts_rerun_bitwise_and_from_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_json(&cfg_path, &base_config());

    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let r = run(&[
            "forward",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(read(&out1.join("trace.csv")), read(&out2.join("trace.csv")));
    assert_eq!(read(&out1.join("result.json")), read(&out2.join("result.json")));
    assert_eq!(
        read(&out1.join("diagnostics.csv")),
        read(&out2.join("diagnostics.csv"))
    );

    // One data row per time step after the headers and column row.
    let trace = String::from_utf8(read(&out1.join("trace.csv"))).unwrap();
    let data_rows = trace
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("t,") && !l.is_empty())
        .count();
    assert_eq!(data_rows, 10);

    // The result file embeds the exact config: rerunning from it reproduces
    // the trace byte for byte.
    let out3 = dir.path().join("c");
    let r = run(&[
        "forward",
        "--config",
        out1.join("result.json").to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(read(&out1.join("trace.csv")), read(&out3.join("trace.csv")));
}

#[test]
fn verify_bounds_passes_and_gates_on_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("ok.json");
    write_json(&cfg_path, &base_config());

    let r = run(&[
        "verify-bounds",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("ok_out").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("containment: pass"), "stdout: {stdout}");

    // Initial data outside S: containment hypotheses fail, exit code 4.
    let init_path = dir.path().join("huge.json");
    write_json(&init_path, &json!({ "u": vec![5.0; 256], "w": vec![0.0; 256] }));
    let mut cfg = base_config();
    cfg["initial"] = json!({ "kind": "file", "path": init_path.to_str().unwrap() });
    let bad_path = dir.path().join("outside.json");
    write_json(&bad_path, &cfg);

    let r = run(&[
        "verify-bounds",
        "--config",
        bad_path.to_str().unwrap(),
        "--out",
        dir.path().join("gate_out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("initial data outside S"), "stderr: {stderr}");
    // The report still records the gate outcome.
    let report = String::from_utf8(read(&dir.path().join("gate_out/report.json"))).unwrap();
    assert!(report.contains("\"hypotheses_met\": false"));
}

#[test]
fn invert_needs_inverse_section_and_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_json(&cfg_path, &base_config());

    // Missing target file.
    let r = run(&[
        "invert",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("o1").to_str().unwrap(),
        "--target",
        dir.path().join("absent.csv").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // Present target but no inverse section in the config.
    let fwd = dir.path().join("fwd");
    let r = run(&[
        "forward",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        fwd.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let r = run(&[
        "invert",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("o2").to_str().unwrap(),
        "--target",
        fwd.join("trace.csv").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("inverse"), "stderr: {stderr}");
}

#[test]
fn distinguish_writes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_json(&cfg_path, &base_config());
    let cav_path = dir.path().join("cavities.json");
    write_json(
        &cav_path,
        &json!([
            { "kind": "disc", "center": [0.5, 0.5], "radius": 0.15 },
            { "kind": "disc", "center": [0.5, 0.5], "radius": 0.25 },
        ]),
    );

    let out = dir.path().join("out");
    let r = run(&[
        "distinguish",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--cavities",
        cav_path.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = String::from_utf8(read(&out.join("matrix.csv"))).unwrap();
    // Long form: header plus one (i, j, misfit) row per pair.
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(csv.starts_with("i,j,misfit\n"));
    assert!(read(&out.join("distinguish.json")).len() > 0);
}

#[test]
fn noise_flag_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_json(&cfg_path, &base_config());

    let mut traces = Vec::new();
    for (name, seed) in [("n1", "9"), ("n2", "9"), ("n3", "10")] {
        let out = dir.path().join(name);
        let r = run(&[
            "forward",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--noise",
            "0.01",
            "--seed",
            seed,
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        traces.push(read(&out.join("trace.csv")));
    }
    assert_eq!(traces[0], traces[1], "same seed must reproduce the noise");
    assert_ne!(traces[0], traces[2], "different seed must change the noise");
}
