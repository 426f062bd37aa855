//! End-to-end checks of the command-line surface: exit codes, artifact
//! files, and byte-level reproducibility.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-fsolve"))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {path:?}: {e}"))
}

/// Drops lines carrying the one nondeterministic metadata field.
fn strip_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains("\"timestamp\""))
        .collect::<Vec<_>>()
        .join("\n")
}

const TRIVIAL_MODEL: &str = r#"{
  "d": 2, "T": 1.0, "controls": ["stay"],
  "Q": {"stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]]},
  "g": {"stay": [{"c": 0.0}, {"c": 0.0}]},
  "sigma": [{"c": 0.0}, {"c": 0.0}]
}"#;

#[test]
fn solve_builtin_succeeds_and_artifacts_are_complete() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let profile = dir.path().join("profile.csv");
    let traj = dir.path().join("trajectory.csv");
    let status = bin()
        .args([
            "solve",
            "--model",
            "builtin:two-state-switch",
            "--t0",
            "0",
            "--m0",
            "1,0",
            "--steps",
            "500",
            "--iters",
            "500",
            "--tol",
            "1e-4",
            "--tol-residual",
            "1e-5",
            "--seed",
            "42",
        ])
        .arg("--out")
        .arg(&out)
        .arg("--profile-out")
        .arg(&profile)
        .arg("--trajectory-out")
        .arg(&traj)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let doc: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    assert_eq!(doc["converged"], serde_json::Value::Bool(true));
    assert_eq!(doc["metadata"]["tool"], "mfg-fsolve");
    assert!(doc["metadata"]["config"]["seed"].is_number());
    assert!(doc["reports"][0]["certificate"]["j"].is_number());

    let traj_text = read(&traj);
    assert!(traj_text.starts_with("t,m_1,m_2,phi_1,phi_2,mu_1,mu_2,z\n"));
    assert_eq!(traj_text.lines().count(), 1 + 501);

    // The exported profile verifies as certified.
    let cert_out = dir.path().join("cert.json");
    let status = bin()
        .args([
            "verify",
            "--model",
            "builtin:two-state-switch",
            "--t0",
            "0",
            "--m0",
            "1,0",
            "--tol-residual",
            "1e-5",
        ])
        .arg("--profile")
        .arg(&profile)
        .arg("--out")
        .arg(&cert_out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let cert: serde_json::Value = serde_json::from_str(&read(&cert_out)).unwrap();
    assert_eq!(cert["certificate"]["verdict"], "certified");
}

#[test]
fn invalid_m0_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let output = bin()
        .args([
            "solve",
            "--model",
            "builtin:two-state-switch",
            "--m0",
            "0.6,0.6",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("simplex"), "stderr: {stderr}");
}

#[test]
fn attain_on_trivial_model_writes_singleton_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("trivial.json");
    std::fs::write(&model_path, TRIVIAL_MODEL).unwrap();
    let out = dir.path().join("cloud.csv");
    let status = bin()
        .arg("attain")
        .arg("--model")
        .arg(&model_path)
        .args([
            "--t0", "0", "--m0", "0.5,0.5", "--samples", "2000", "--steps", "50", "--seed", "7",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "phi_1,phi_2,dist_m,dist_mu,z_abs,source");
    assert_eq!(lines.len(), 2, "singleton cloud expected: {text}");
    assert!(lines[1].ends_with("backward-sample"));
    let sidecar = read(&dir.path().join("cloud.csv.meta.json"));
    let doc: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(doc["cloud"]["query"]["m0"][0].as_f64().unwrap(), 0.5);
}

#[test]
fn attain_with_impossible_tolerance_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("trivial.json");
    std::fs::write(&model_path, TRIVIAL_MODEL).unwrap();
    let out = dir.path().join("cloud.csv");
    let status = bin()
        .arg("attain")
        .arg("--model")
        .arg(&model_path)
        .args([
            "--t0", "0", "--m0", "0.5,0.5", "--samples", "200", "--steps", "20", "--tol-m", "0",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // Diagnostics still written: header plus no rows, sidecar with misses.
    let text = read(&out);
    assert_eq!(text.lines().count(), 1);
    let sidecar: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("cloud.csv.meta.json"))).unwrap();
    assert_eq!(sidecar["cloud"]["nearest_misses"].as_array().unwrap().len(), 10);
}

#[test]
fn master_build_and_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("trivial.json");
    std::fs::write(&model_path, TRIVIAL_MODEL).unwrap();
    let field_path = dir.path().join("field.json");
    let status = bin()
        .arg("master-build")
        .arg("--model")
        .arg(&model_path)
        .args(["--nt", "3", "--mesh", "4", "--starts", "2", "--steps", "50", "--iters", "50"])
        .arg("--out")
        .arg(&field_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let csv_path = dir.path().join("residuals.csv");
    let status = bin()
        .arg("master-check")
        .arg("--model")
        .arg(&model_path)
        .arg("--field")
        .arg(&field_path)
        .arg("--out")
        .arg(&csv_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = read(&csv_path);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t_index,node_index,residual,flagged");
    // One interior time column, five simplex nodes.
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines[1].ends_with("false"));
}

#[test]
fn trajectory_command_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let status = bin()
        .args([
            "trajectory",
            "--model",
            "builtin:crowd-aversion-d3",
            "--t0",
            "0.25",
            "--m0",
            "0.2,0.5,0.3",
            "--steps",
            "40",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = read(&out);
    assert!(text.starts_with("t,m_1,m_2,m_3,phi_1,phi_2,phi_3,mu_1,mu_2,mu_3,z\n"));
    assert_eq!(text.lines().count(), 1 + 41);
}

#[test]
fn identical_configs_reproduce_artifacts_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("report{run}.json"));
        let status = bin()
            .args([
                "solve",
                "--model",
                "builtin:two-state-switch",
                "--t0",
                "0",
                "--m0",
                "1,0",
                "--steps",
                "400",
                "--iters",
                "200",
                "--tol-residual",
                "1e-5",
                "--seed",
                "42",
                "--starts",
                "3",
                "--jobs",
                if run == 0 { "1" } else { "4" },
            ])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(strip_timestamp(&read(&out)));
    }
    assert_eq!(
        outputs[0], outputs[1],
        "artifacts differ between identical seeded runs"
    );
}
