use std::path::Path;
use std::process::{Command, Output};

fn dualvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualvq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = "seed = 3\neval_every = 2\ncheckpoint_every = 2\n[data]\nn = 24\n[train]\nsteps = 4\ndisc_start_step = 2\n";

#[test]
fn bad_split_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[quantizer]\nsplit_global = 5\nsplit_local = 4\n");
    let out = dualvq(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('5') && err.contains('4'), "{err}");
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "typo.toml", "seed = 1\n[train]\nlearning_rat = 0.1\n");
    assert_eq!(dualvq(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "hot.toml", &format!("{TINY}learning_rate = 1e300\n"));
    let out_dir = dir.path().join("run");
    let out = dualvq(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    // logs written up to the failure survive
    assert!(out_dir.join("train.csv").exists());
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = dualvq(&["train", "--config", &cfg, "--out", run_s, "--steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let latest = run.join("checkpoints/latest");
    let out = dualvq(&["train", "--config", &cfg, "--out", run_s, "--resume", latest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("train.csv")).unwrap().lines().count(), 5);

    let fin = run.join("checkpoints/final");
    let metrics = dir.path().join("test.json");
    let out = dualvq(&["eval", "--checkpoint", fin.to_str().unwrap(), "--split", "test", "--out", metrics.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(v["split"], "test");
    assert_eq!(v["step"], 4);

    let dump = dir.path().join("local.dvqc");
    let out = dualvq(&["export", "--checkpoint", fin.to_str().unwrap(), "--which", "local", "--out", dump.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("K=32 d=4"));

    let out = dualvq(&["train", "--config", &cfg, "--seed", "4", "--out", run_s, "--steps", "6", "--resume", fin.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
