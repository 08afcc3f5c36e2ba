use std::process::{Command, Output};

fn autoci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoci")).args(args).output().expect("binary runs")
}

#[test]
fn synth_writes_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = autoci(&["synth", "--out", out, "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let counts = std::fs::read_to_string(dir.path().join("synth_counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 4);
    assert!(counts.starts_with("size,generic_count,typesafe_count,elapsed_seconds"));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn toy_run_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, "kind = \"toy-finite\"\nmethods = [\"autoci\", \"icp\"]\n[scm]\nn_vars = 3\n[learner]\nwarmup_epochs = 2\n").unwrap();
    let out = dir.path().join("out");
    let o = autoci(&["toy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--replicates", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["replicates"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_program_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = autoci(&["toy", "--out", dir.path().to_str().unwrap(), "--program", "COMP(nn, CAT(pred)"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("program"));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "kind = \"toy-finite\"\nreplicas = 3\n").unwrap();
    let o = autoci(&["toy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = autoci(&["toy", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = autoci(&["synth", "--out", dir.path().to_str().unwrap(), "--format", "xml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    let o = autoci(&["synth", "--out", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
