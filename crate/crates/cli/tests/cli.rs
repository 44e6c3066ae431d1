use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "n_source_requests": 300, "n_target_requests": 80, "eval_episodes": 40, "n_seeds": 2,
  "transfer": {"iterations": 100, "source_iterations": 100, "log_every": 20,
               "agent": {"batch_size": 32},
               "nsr": {"epochs": 2, "n_inducing": 12, "hidden": [12, 6], "batch_size": 128}}
}"#;

fn hxfer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hxfer"))
        .arg("--config")
        .arg(dir.join("cfg.json"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    dir
}

#[test]
fn staged_pipeline_writes_every_artifact() {
    let dir = setup();
    for stage in [&["gen-data"][..], &["train-nsr"], &["train-source"], &["train-target", "--method", "shtaa"], &["evaluate"]] {
        let out = hxfer(dir.path(), stage);
        assert!(out.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    for f in ["source.jsonl", "target.jsonl", "nsr_source.json", "nsr_target.json", "agent_source.json", "agent_target.json", "train_log.csv", "eval.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(eval.starts_with("agent,episodes,seed,r_ad,r_fee"));
}

#[test]
fn grid_and_sweep_write_csv() {
    let dir = setup();
    let out = hxfer(dir.path(), &["grid", "--methods", "no_transfer,shtaa", "--n-seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);

    let out = hxfer(dir.path(), &["sweep", "--param", "tau", "--values", "0,0.5,1.1", "--n-seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep_tau.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = setup();
    let b = setup();
    for dir in [&a, &b] {
        assert!(hxfer(dir.path(), &["--seed", "9", "gen-data"]).status.success());
        assert!(hxfer(dir.path(), &["--seed", "9", "train-target", "--method", "no_transfer"]).status.success());
    }
    for f in ["source.jsonl", "agent_target.json", "train_log.csv"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn failures_exit_nonzero() {
    let dir = setup();
    // no datasets yet
    let out = hxfer(dir.path(), &["train-source"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));

    std::fs::write(dir.path().join("cfg.json"), r#"{"transfer": {"k": 2}}"#).unwrap();
    assert!(!hxfer(dir.path(), &["gen-data"]).status.success());

    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    assert!(!hxfer(dir.path(), &["--tau", "-1", "gen-data"]).status.success());
}
