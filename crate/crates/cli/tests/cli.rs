use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_raliflow");

/// A small problem so the whole file runs in seconds.
const CONFIG: &str = r#"{
    "split": {"pairs": 5, "holdout": 2},
    "model": {"channels": 4, "embedding": 4, "gru_hidden": 8, "gru_iterations": 2, "unet_base": 4},
    "training": {"epochs": 2, "batch_size": 2}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .current_dir(dir)
        .args(["--config", "c.json"])
        .args(args)
        .env("RALIFLOW_THREADS", "1")
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    ok(dir.path(), &["synth", "--out", "data"]);
    dir
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap()
}

#[test]
fn untrained_model_scores_the_zero_flow_baseline() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["eval", "--data", "data", "--out", "model.json"]);
    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--out",
            "zero.json",
            "--zero-flow",
        ],
    );
    assert_eq!(read(d, "model.json"), read(d, "zero.json"));
    let v: serde_json::Value = serde_json::from_slice(&read(d, "model.json")).unwrap();
    assert!(v["lidar"]["epe_3d"].as_f64().unwrap() > 0.0);
}

#[test]
fn labelgen_is_byte_identical_across_runs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["labelgen", "--data", "data", "--out", "a"]);
    ok(d, &["labelgen", "--data", "data", "--out", "b"]);
    let mut names: Vec<_> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in names {
        let n = n.to_str().unwrap();
        assert_eq!(
            read(d, &format!("a/{n}")),
            read(d, &format!("b/{n}")),
            "{n}"
        );
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &["train", "--data", "data", "--out", "full", "--epochs", "2"],
    );
    ok(
        d,
        &["train", "--data", "data", "--out", "half", "--epochs", "1"],
    );
    ok(
        d,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "half",
            "--epochs",
            "1",
            "--resume",
            "half/checkpoint.rlfw",
        ],
    );
    assert_eq!(
        read(d, "full/checkpoint.rlfw"),
        read(d, "half/checkpoint.rlfw")
    );
    assert_eq!(
        read(d, "full/train_log.jsonl"),
        read(d, "half/train_log.jsonl")
    );
    let log = String::from_utf8(read(d, "full/train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for k in ["epoch", "l_li", "l_ra", "l_ins", "l_total"] {
        assert!(lines[1].get(k).is_some(), "{k}");
    }
}

#[test]
fn pipeline_commands_write_their_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["preprocess", "--data", "data", "--out", "pre"]);
    assert!(d.join("pre/masks/00000a_radar.csv").exists());
    assert!(d.join("pre/lidar/00004b.csv").exists());
    ok(d, &["infer", "--data", "data", "--out", "inf"]);
    let flows = String::from_utf8(read(d, "inf/00003a_lidar.csv")).unwrap();
    assert!(flows.starts_with("x,y,z,fx,fy,fz\n"));
    ok(
        d,
        &[
            "inspect-heatmap",
            "--data",
            "data",
            "--frame",
            "00000a",
            "--out",
            "g.csv",
        ],
    );
    let g = String::from_utf8(read(d, "g.csv")).unwrap();
    assert_eq!(g.lines().count(), 65);
    for v in g.lines().skip(1).flat_map(|l| l.split(',')) {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn failures_report_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = |out: Output| -> serde_json::Value {
        assert!(!out.status.success());
        serde_json::from_slice(&out.stderr).unwrap()
    };
    // no config file at all
    assert_eq!(
        err(run(d, &["synth", "--out", "x"]))["error"],
        "missing_file"
    );
    std::fs::write(d.join("c.json"), r#"{"grid": {"width": 63}}"#).unwrap();
    assert_eq!(
        err(run(d, &["synth", "--out", "x"]))["error"],
        "config_invalid"
    );
    std::fs::write(d.join("c.json"), r#"{"unknown": 1}"#).unwrap();
    assert_eq!(
        err(run(d, &["synth", "--out", "x"]))["error"],
        "config_invalid"
    );
    std::fs::write(d.join("c.json"), "{}").unwrap();
    let e = err(run(d, &["eval", "--data", "nowhere", "--out", "m.json"]));
    assert_eq!(e["error"], "missing_file");
    assert!(e["message"].as_str().unwrap().contains("nowhere"));
    std::fs::create_dir_all(d.join("broken")).unwrap();
    std::fs::write(d.join("broken/manifest.json"), "[1, 2]").unwrap();
    assert_eq!(
        err(run(d, &["eval", "--data", "broken", "--out", "m.json"]))["error"],
        "schema_violation"
    );
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), "{}").unwrap();
    let out = ok(d, &["--seed", "9", "--print-config"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scene"]["seed"], 9);
    assert_eq!(v["training"]["seed"], 9);
    assert_eq!(v["model"]["init_seed"], 9);
    std::fs::write(d.join("c.json"), &out.stdout).unwrap();
    let again = ok(d, &["--print-config"]);
    assert_eq!(out.stdout, again.stdout);
}
