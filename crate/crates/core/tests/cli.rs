use std::path::Path;
use std::process::Command;

use sen_core::cli::run_command;
use sen_core::config::SenConfig;
use sen_core::metrics::read_metrics;
use sen_core::network::Sen;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_command(std::iter::once("sen").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = SenConfig::default();
    cfg.training.steps = 6;
    cfg.training.eval_every = 3;
    cfg.task.train_samples = 64;
    cfg.task.test_samples = 32;
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn params_matches_library_counts() {
    let (code, out, _) = run(&["params"]);
    assert_eq!(code, 0);
    let (frozen, trainable) = Sen::new(&SenConfig::default()).unwrap().count_parameters();
    assert_eq!(
        out,
        format!("frozen {frozen}\ntrainable {trainable}\ntotal {}\n", frozen + trainable)
    );
}

#[test]
fn ablate_depth_emits_one_row_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("ablate");
    let (code, out, err) = run(&["ablate", "--axis", "depth", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let rows = read_metrics(&out_dir.join("summary.jsonl")).unwrap();
    let arms: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(arms, ["L=1", "L=2", "L=3", "L=4"]);
    assert_eq!(out.lines().count(), 4);
}

#[test]
fn unknown_axis_is_an_error() {
    let (code, _, err) = run(&["ablate", "--axis", "width"]);
    assert_eq!(code, 1);
    assert!(err.contains("width"), "{err}");
}

#[test]
fn gradcheck_single_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SenConfig::default();
    cfg.shared_dim = 8;
    cfg.ra.prompt_tokens = 2;
    cfg.ra.layers = 1;
    let path = dir.path().join("g.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let (code, out, _) = run(&["gradcheck", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().last().unwrap().starts_with("max_rel_err "));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let (code, _, err) = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let ckpt = out_dir.join("checkpoint.senc");
    let (code, out, _) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("test_accuracy"));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    std::fs::write(&ckpt, bytes).unwrap();
    let (code, _, err) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn zero_shot_eval_is_exact_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"task": {"kind": "contrastive", "noise": 0.0}}"#).unwrap();
    let (code, out, err) = run(&["eval", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let record: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(record["value"], 1.0);
}

#[test]
fn binary_prints_help_and_counts() {
    let exe = env!("CARGO_BIN_EXE_sen");
    let help = Command::new(exe).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for cmd in ["train", "eval", "gradcheck", "ablate", "params"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let params = Command::new(exe).arg("params").output().unwrap();
    assert!(params.status.success());
    assert!(String::from_utf8(params.stdout).unwrap().starts_with("frozen "));
    let bad = Command::new(exe).arg("frobnicate").output().unwrap();
    assert!(!bad.status.success());
}
