use std::path::Path;
use std::process::{Command, Output};

fn ncap_swim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncap-swim"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = r#"{"es": {"population_size": 4, "total_timesteps": 4000}, "seeds": [0, 1], "eval_episodes": 2}"#;

#[test]
fn train_then_eval_transfer_and_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = ncap_swim(&["train", "--config", &cfg, "--out", "runs", "--seed", "5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("runs/seed_5.final.json");
    assert!(ckpt.exists());
    assert!(!dir.path().join("runs/seed_0.csv").exists());
    let ckpt = ckpt.to_str().unwrap();

    for (cmd, file) in [("eval", "eval.csv"), ("transfer", "transfer.csv"), ("rollout", "rollout.jsonl")] {
        let out = ncap_swim(
            &[cmd, "--config", &cfg, "--checkpoint", ckpt, "--out", cmd, "--nprime", "3,5"],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(cmd).join(file).exists(), "{cmd}");
    }
    let transfer = std::fs::read_to_string(dir.path().join("transfer/transfer.csv")).unwrap();
    assert_eq!(transfer.lines().count(), 3);
}

#[test]
fn budget_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = ncap_swim(&["train", "--config", &cfg, "--out", "runs", "--seed", "0", "--budget", "8000"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let curve = std::fs::read_to_string(dir.path().join("runs/seed_0.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ncap_swim(&["train", "--config", "missing.json"], dir.path()).status.code(), Some(1));
    let bad = write_config(dir.path(), r#"{"seedz": [1]}"#);
    assert_eq!(ncap_swim(&["train", "--config", &bad], dir.path()).status.code(), Some(1));
    let empty = write_config(dir.path(), r#"{"seeds": []}"#);
    assert_eq!(ncap_swim(&["train", "--config", &empty], dir.path()).status.code(), Some(1));
    assert_eq!(ncap_swim(&["launch"], dir.path()).status.code(), Some(1));
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(ncap_swim(&["eval", "--config", &cfg], dir.path()).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_ncap-swim"))
        .args(["train", "--config", &cfg])
        .current_dir(dir.path())
        .env("NCAP_SWIM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    std::fs::create_dir(dir.path().join("not_a_file")).unwrap();
    let out = ncap_swim(&["eval", "--config", &cfg, "--checkpoint", "not_a_file"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ncap_swim(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("transfer"));
}
