//! End-to-end runs of the `cycada` binary: exit codes, overrides, refusal to
//! overwrite, and the digit path from raw archives to evaluation.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;

fn cycada(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cycada"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("CYCADA_DATA_ROOT")
        .env_remove("CYCADA_OUT_ROOT")
        .output()
        .expect("spawn cycada")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Toy overrides that keep a run to a couple of seconds.
const QUICK: &[&str] = &[
    "-o", "data.kind=\"toy\"",
    "-o", "data.toy.samples_per_class=12",
    "-o", "data.toy.test_samples_per_class=6",
    "-o", "experiment.id=\"quick\"",
    "-o", "experiment.stages=[\"source-pretrain\"]",
    "-o", "models.task_net.conv1=4",
    "-o", "models.task_net.conv2=8",
    "-o", "models.task_net.hidden=16",
    "-o", "stages.source-pretrain.batch_size=8",
    "-o", "stages.source-pretrain.max_epochs=1",
];

fn with_quick<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(QUICK);
    v
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cycada(&["run-experiment", "-o", "stages.pixel-adapt.weights.cycel=1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("cycel"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cycada(&["run-experiment", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(cycada(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(cycada(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn report_without_runs_exits_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let o = cycada(&["report", "--from", "."], dir.path());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("no completed runs"));
}

#[test]
fn missing_prepared_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cycada(
        &["train-source", "-c", preset("digits/usps-mnist.toml").to_str().unwrap(), "-o", "data.root=\"nowhere\""],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn run_experiment_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let first = cycada(&with_quick(&["run-experiment", "--out", "runs", "--seeds", "2"]), dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("seed 0:") && text.contains("seed 1:") && text.contains("stderr, 2 runs"), "{text}");
    let manifest = dir.path().join("runs/quick/manifest.toml");
    let before = fs::read(&manifest).unwrap();

    let again = cycada(&with_quick(&["run-experiment", "--out", "runs", "--seeds", "2"]), dir.path());
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(fs::read(&manifest).unwrap(), before);

    let forced = cycada(&with_quick(&["run-experiment", "--out", "runs", "--seeds", "2", "--force"]), dir.path());
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
    // Same config and seeds: the replacement is bitwise identical.
    assert_eq!(fs::read(&manifest).unwrap(), before);

    let report = cycada(&["report", "--from", "runs"], dir.path());
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    assert!(dir.path().join("runs/report").read_dir().unwrap().count() > 0);
}

#[test]
fn overrides_take_precedence_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.toml");
    fs::write(&file, "[stages.source-pretrain]\nbatch_size = 4\nmax_epochs = 9\n").unwrap();
    let mut args = vec!["train-source", "-c", file.to_str().unwrap(), "--out", "runs"];
    args.extend_from_slice(QUICK);
    let o = cycada(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let snapshot = fs::read_to_string(dir.path().join("runs/quick/seed-0/source-pretrain/resolved-config.toml")).unwrap();
    let cfg: toml::Value = toml::from_str(&snapshot).unwrap();
    let stage = &cfg["stages"]["source-pretrain"];
    assert_eq!(stage["batch_size"].as_integer(), Some(8));
    assert_eq!(stage["max_epochs"].as_integer(), Some(1));

    // A finished stage is not silently replaced.
    let again = cycada(&args, dir.path());
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn divergent_training_aborts_with_four() {
    let diverge = ["-o", "stages.source-pretrain.optimizer={kind=\"sgd\",lr=1e30}", "-o", "stages.source-pretrain.max_epochs=3"];
    // Every run aborts: the experiment as a whole fails.
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_quick(&["run-experiment", "--out", "runs", "--seed", "0", "--seed", "1"]);
    args.extend_from_slice(&diverge);
    let o = cycada(&args, dir.path());
    assert_eq!(o.status.code(), Some(4), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("every run aborted"), "{}", stderr(&o));

    // Seed 2 survives (its units die instead of overflowing): the aggregate
    // covers the finished run and the aborted ones are listed.
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_quick(&["run-experiment", "--out", "runs", "--seed", "0", "--seed", "2"]);
    args.extend_from_slice(&diverge);
    let o = cycada(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seed 0 aborted in source-pretrain") && text.contains("seed 2:"), "{text}");
}

#[test]
fn digits_from_raw_archives_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    write_raw_archives(&dir.path().join("raw"), 5);
    let o = cycada(&["prepare-data", "--raw", "raw", "--shift", "mnist-usps", "--out", "data"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("train 30") && stdout(&o).contains("train 20"), "{}", stdout(&o));

    let cfg = preset("digits/mnist-usps.toml");
    let small = [
        "-c", cfg.to_str().unwrap(),
        "-o", "data.root=\"data\"",
        "-o", "stages.source-pretrain.max_epochs=1",
        "-o", "stages.source-pretrain.batch_size=10",
        "--out", "runs",
    ];
    let mut train = vec!["train-source"];
    train.extend_from_slice(&small);
    let o = cycada(&train, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("target score"), "{}", stdout(&o));

    let ckpt = "runs/digits-mnist-usps/seed-0/source-pretrain/checkpoint/task.ckpt";
    let mut eval = vec!["evaluate", "--checkpoint", ckpt];
    eval.extend_from_slice(&small);
    let o = cycada(&eval, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = dir.path().join("runs/digits-mnist-usps/evaluate-target/metrics.json");
    assert!(metrics.exists() && metrics.with_file_name("confusion.png").exists());

    // Corrupting a prepared split is caught by its content hash.
    let images = fs::read_dir(dir.path().join("data")).unwrap().flatten().find(|e| e.file_name().to_string_lossy().contains("usps")).unwrap().path();
    let victim = fs::read_dir(&images).unwrap().flatten().map(|e| e.path()).find(|p| p.to_string_lossy().contains("test") && p.to_string_lossy().contains("images")).unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let mut eval_force = eval.clone();
    eval_force.push("--force");
    let o = cycada(&eval_force, dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
