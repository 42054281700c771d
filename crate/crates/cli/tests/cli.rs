use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrial-ecg"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "geometry": {"n_meshes": 2},
  "simulation": {"pacing_sites": 3},
  "model": {"d_z": 4, "d_h": 4, "d_e": 4, "d_a": 4, "d_hid": 4, "d_head": 4, "k": 16},
  "schedule": {"epochs": 3, "batch_size": 1}
}"#;

#[test]
fn exit_codes() {
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        cli(&["verify", "--data", "/nonexistent/dataset"]).status.code(),
        Some(2)
    );
    assert_eq!(cli(&["grad-check"]).status.code(), Some(0));
}

#[test]
fn generate_train_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, SMALL).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let out = cli(&["gen-data", "--config", path(&config), "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("6 samples"));
    assert_eq!(cli(&["verify", "--data", path(&data)]).status.code(), Some(0));

    let out = cli(&["train", "--data", path(&data), "--out", path(&run), "--f64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 3);
    for file in ["checkpoint.json", "checkpoint.bin", "train_log.csv"] {
        assert!(run.join(file).exists(), "{file}");
    }

    let report = dir.path().join("report");
    let out = cli(&[
        "eval",
        "--checkpoint",
        path(&run),
        "--data",
        path(&data),
        "--split",
        "val",
        "--out",
        path(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.join("eval_val.csv").exists() && report.join("eval_val.json").exists());
    let bad = cli(&[
        "eval",
        "--checkpoint",
        path(&run),
        "--data",
        path(&data),
        "--split",
        "holdout",
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let plots = dir.path().join("plots");
    let out = cli(&[
        "plot",
        "--checkpoint",
        path(&run),
        "--data",
        path(&data),
        "--out",
        path(&plots),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(&plots).unwrap().count() >= 2);

    // a blob edited after generation is reported by name
    let blob = std::fs::read_dir(data.join("samples"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let out = cli(&["verify", "--data", path(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let name = blob.file_stem().unwrap().to_str().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(name));
}
