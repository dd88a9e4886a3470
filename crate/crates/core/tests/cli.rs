use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgcrs::config::RunConfig;
use kgcrs::fixture;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kgcrs"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fixture20").join(name)
}

fn tiny_config(dir: &Path) -> PathBuf {
    let body = fixture::TOY_CONFIG
        .replace("backbone_pretrain_steps = 200", "backbone_pretrain_steps = 5")
        .replace("stage2_max_steps = 200", "stage2_max_steps = 3");
    let text = format!(
        "task = \"rec\"\n\n[paths]\nkg = {:?}\nitems = {:?}\ncorpus = {:?}\n{body}",
        data("kg.tsv"),
        data("items.txt"),
        data("dialogues.jsonl"),
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn quick_selftest_passes() {
    let out = run(&["selftest", "--quick"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nfrobnicate = 3\n").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn out_of_range_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[loss]\ntau = -1.0\n").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}

#[test]
fn missing_files_are_run_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--config", "/nonexistent/cfg.toml", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[paths]\nkg = \"/nonexistent/kg.tsv\"\nitems = \"/x\"\ncorpus = \"/y\"\n").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_subcommand_is_usage() {
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--task", "rec", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint").is_dir());
    assert!(fs::read_dir(out_dir.join("checkpoint")).unwrap().count() > 0);
    assert!(!fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap().trim().is_empty());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["config"].is_object());
    assert!(metrics["metrics"]["recall@10"].is_number());

    let eval_dir = dir.path().join("eval");
    let ckpt = out_dir.join("checkpoint");
    let out = run(&["eval", "--config", s(&cfg), "--out", s(&eval_dir), "--checkpoint", s(&ckpt), "--split", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("metrics.json").is_file());
}

#[test]
fn build_trees_writes_trees_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("trees");
    let out = run(&["build-trees", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trees = fs::read_to_string(out_dir.join("trees.txt")).unwrap();
    assert!(trees.lines().all(|l| l.split('\t').count() == 3));
    assert!(trees.contains('#'));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["trees"].as_u64().unwrap() as usize, trees.lines().count());
    assert!(manifest["config"]["tree"].is_object());
}

#[test]
fn shipped_toy_config_matches_library_toy_config() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut shipped = RunConfig::load(&path).unwrap();
    shipped.paths = fixture::toy_config().paths;
    assert_eq!(shipped.to_toml(), fixture::toy_config().to_toml());
}
