use std::path::Path;
use std::process::{Command, Output};

fn phlight(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phlight")).env("PHLIGHT_OUT", out).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_grid_is_seeded_and_loadable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["generate-grid", "--rows", "2", "--cols", "2", "--demand", "2000", "--seed", "9"];
    assert!(phlight(a.path(), &args).status.success());
    assert!(phlight(b.path(), &args).status.success());
    let fa = std::fs::read(a.path().join("flow.json")).unwrap();
    assert_eq!(fa, std::fs::read(b.path().join("flow.json")).unwrap());
    let r = a.path().join("roadnet.json");
    let f = a.path().join("flow.json");
    let o = phlight(a.path(), &["simulate", "--roadnet", r.to_str().unwrap(), "--flow", f.to_str().unwrap(), "--controller", "max-pressure"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("att"));
    assert!(a.path().join("episode.jsonl").exists());
}

#[test]
fn validation_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "[agent]\ntau = 0.0\n").unwrap();
    let o = phlight(d.path(), &["--config", cfg.to_str().unwrap(), "evaluate", "--baseline", "fixed-time"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, "[agent]\nunknown_key = 1\n").unwrap();
    let o = phlight(d.path(), &["--config", cfg.to_str().unwrap(), "evaluate", "--baseline", "fixed-time"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    let o = phlight(d.path(), &["evaluate", "--grid", "2by2", "--baseline", "fixed-time"]);
    assert_eq!(o.status.code(), Some(2));
    let o = phlight(d.path(), &["train", "--mask", "sometimes"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_flow_evaluation_is_flagged_empty() {
    let d = tempfile::tempdir().unwrap();
    let o = phlight(d.path(), &["evaluate", "--demand", "0", "--baseline", "fixed-time", "--seeds", "1"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("(empty)"), "{s}");
    assert!(s.contains("att     0.00"), "{s}");
}

#[test]
fn offline_training_writes_checkpoints_and_metrics() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("small.toml");
    std::fs::write(
        &cfg,
        "[agent]\nembed_dim = 8\nhead_width = 8\nbatch_size = 16\n[train]\nhorizon = 600\ncollect_episodes = 2\ntrain_episodes = 3\nsteps_per_episode = 4\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = phlight(d.path(), &["--config", c, "train", "--mode", "offline", "--mask", "mean", "--variant", "conservative"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for e in 1..=3 {
        assert!(d.path().join(format!("episode_{e:03}.ckpt")).exists());
    }
    let csv = std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("episode,seed,att,datt,dar,mean_diag,config_hash"));

    let ck = d.path().join("episode_002.ckpt");
    let o = phlight(d.path(), &["--config", c, "diagnose", "--checkpoint", ck.to_str().unwrap(), "--samples", "6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("contributions.json")).unwrap()).unwrap();
    let m = &json[0]["matrix"];
    for j in 0..4 {
        let s: f64 = (0..4).map(|i| m[i][j].as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    let o = phlight(d.path(), &["--config", c, "compare", "--checkpoint", ck.to_str().unwrap(), "--seeds", "1,2"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("fixed_time") && s.contains("max_pressure") && s.contains("episode_002"), "{s}");

    let a = phlight(d.path(), &["--config", c, "evaluate", "--checkpoint", ck.to_str().unwrap(), "--seeds", "4,5"]);
    let b = phlight(d.path(), &["--config", c, "evaluate", "--checkpoint", ck.to_str().unwrap(), "--seeds", "4,5"]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn collected_dataset_feeds_offline_training() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("small.toml");
    std::fs::write(&cfg, "[agent]\nembed_dim = 8\nhead_width = 8\nbatch_size = 16\n[train]\nhorizon = 600\ntrain_episodes = 1\nsteps_per_episode = 2\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert!(phlight(d.path(), &["--config", c, "collect", "--episodes", "2"]).status.success());
    let data = d.path().join("dataset.jsonl");
    assert!(std::fs::read_to_string(&data).unwrap().lines().count() > 16);
    let o = phlight(d.path(), &["--config", c, "train", "--mode", "offline", "--dataset", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
