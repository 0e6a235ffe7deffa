//! End-to-end tests of the `hne` binary: training runs, anytime prediction,
//! cost reporting, determinism, and error exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hne"))
}

fn tiny_config(dir: &Path, epochs: usize, seed: u64) -> PathBuf {
    let cfg = format!(
        r#"{{
  "tree": {{
    "depth": 2,
    "classes": 3,
    "input": {{ "features": {{ "dim": 6 }} }},
    "blocks": [
      {{ "kind": "linear", "layers": 1, "width": 8 }},
      {{ "kind": "linear", "layers": 1, "width": 8 }},
      {{ "kind": "linear", "layers": 1, "width": 8 }}
    ]
  }},
  "data": {{ "synth": {{ "classes": 3, "dims": 6, "train_per_class": 40, "test_per_class": 20, "separation": 3.0, "seed": 5 }} }},
  "train": {{ "epochs": {epochs}, "batch_size": 32, "lr": 0.01, "weight_decay": 0.0, "master_seed": {seed} }},
  "loss": {{ "objective": "independent" }}
}}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_writes_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2, 1);
    let out_dir = tmp.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&out_dir));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    // header + epochs * (depth + 1) rows
    assert_eq!(lines.len(), 1 + 2 * 3, "metrics:\n{metrics}");
    assert!(lines[0].starts_with("epoch,budget,models,accuracy"));
    assert!(out_dir.join("checkpoint_final.bin").exists());
    let echoed = fs::read_to_string(out_dir.join("config.json")).unwrap();
    assert!(echoed.contains("\"epochs\": 2"));
    // every defaulted knob is materialized in the echo
    assert!(echoed.contains("\"momentum\""));
    assert!(echoed.contains("\"temperature\""));
}

#[test]
fn train_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2, 9);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&a));
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&b));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint_final.bin")).unwrap(),
        fs::read(b.join("checkpoint_final.bin")).unwrap()
    );
    // a different seed changes the metrics
    let c = tmp.path().join("c");
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "10"])
        .arg("--output")
        .arg(&c));
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn missing_config_exits_two() {
    let out = bin()
        .args(["train", "--config", "/nonexistent/nope.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.json"), "stderr: {err}");
}

#[test]
fn bad_config_key_exits_two_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, 1);
    let text = fs::read_to_string(&cfg).unwrap().replace("\"epochs\"", "\"epochz\"");
    fs::write(&cfg, text).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz") && err.contains("line"), "stderr: {err}");
}

fn trained_checkpoint(tmp: &Path) -> (PathBuf, PathBuf) {
    let cfg = tiny_config(tmp, 2, 3);
    let out_dir = tmp.join("run");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&out_dir));
    (out_dir.join("checkpoint_final.bin"), cfg)
}

fn write_inputs(tmp: &Path) -> PathBuf {
    let path = tmp.join("inputs.csv");
    let mut text = String::new();
    for i in 0..4 {
        let row: Vec<String> = (0..6).map(|j| format!("{}", (i * 6 + j) as f32 * 0.1 - 1.0)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

fn parse_predictions(stdout: &str) -> Vec<(usize, Vec<usize>)> {
    // sections: "budget,<b>" ... "sample,prediction" then rows
    let mut sections = Vec::new();
    let mut current: Option<(usize, Vec<usize>)> = None;
    for line in stdout.lines() {
        if let Some(b) = line.strip_prefix("budget,") {
            if let Some(s) = current.take() {
                sections.push(s);
            }
            current = Some((b.parse().unwrap(), Vec::new()));
        } else if let Some((_, preds)) = current.as_mut() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(_), Ok(p)) = (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
                    preds.push(p);
                }
            }
        }
    }
    if let Some(s) = current.take() {
        sections.push(s);
    }
    sections
}

#[test]
fn anytime_budget_flop_limit_and_extension_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, cfg) = trained_checkpoint(tmp.path());
    let inputs = write_inputs(tmp.path());

    // budget 0: single member
    let out = run_ok(bin()
        .args(["anytime", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&inputs)
        .args(["--budget", "0"]));
    let sections = parse_predictions(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(sections.len(), 1);
    assert_eq!(sections[0].0, 0);
    assert_eq!(sections[0].1.len(), 4);

    // the flop ladder from the cost table picks budgets by <=
    let flops_out = run_ok(bin().args(["flops", "--config"]).arg(&cfg));
    let flops_text = String::from_utf8_lossy(&flops_out.stdout).to_string();
    let ladder: Vec<u64> = flops_text
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();

    let out = run_ok(bin()
        .args(["anytime", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&inputs)
        .args(["--flop-limit", &ladder[1].to_string()]));
    let sections = parse_predictions(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(sections[0].0, 1, "exactly at the budget-1 cost picks budget 1");

    // below the minimum: error names the feasible floor
    let out = bin()
        .args(["anytime", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&inputs)
        .args(["--flop-limit", &(ladder[0] - 1).to_string()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&ladder[0].to_string()), "stderr: {err}");

    // extension from budget 1 equals a fresh budget-2 answer
    let extended = run_ok(bin()
        .args(["anytime", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&inputs)
        .args(["--budget", "1", "--extend"]));
    let fresh = run_ok(bin()
        .args(["anytime", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&inputs)
        .args(["--budget", "2"]));
    let ext_sections = parse_predictions(&String::from_utf8_lossy(&extended.stdout));
    let fresh_sections = parse_predictions(&String::from_utf8_lossy(&fresh.stdout));
    assert_eq!(ext_sections.len(), 2);
    assert_eq!(ext_sections[1].0, 2);
    assert_eq!(ext_sections[1].1, fresh_sections[0].1);
}

#[test]
fn flops_reports_ladder_and_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, 1);
    let out = run_ok(bin().args(["flops", "--config"]).arg(&cfg));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "budget_b,models,flops,cumulative_fraction");
    // depth 2: budgets 0..=2, then three ratio lines
    assert_eq!(lines.len(), 1 + 3 + 3);
    assert!(lines[4].starts_with("ratio,analytic,12/7,"));
    assert!(lines[5].starts_with("ratio,measured_uniform_cost,12/7,"));
    // the classifier head makes real costs non-uniform
    assert!(lines[6].starts_with("ratio,measured_flops,"));
    assert!(lines[6].ends_with("model-assumption: non-uniform"));
    // cumulative fraction reaches 1
    assert!(lines[3].ends_with("1.000000"));
}

#[test]
fn evaluate_prints_per_budget_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, cfg) = trained_checkpoint(tmp.path());
    let out = run_ok(bin()
        .args(["evaluate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&cfg));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "budget,models,flops,accuracy");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("diversity,"));
}

#[test]
fn compare_distillation_emits_all_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, 1);
    let out = run_ok(bin()
        .args(["compare-distillation", "--config"])
        .arg(&cfg)
        .args(["--seeds", "1"])
        .arg("--output")
        .arg(tmp.path().join("cmp")));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "objective,alpha,budget,models,flops,median_accuracy,median_diversity"
    );
    // 5 variants x 3 budgets
    assert_eq!(lines.len(), 1 + 5 * 3);
    for needle in ["independent,", "structured,", "hierarchical,", "codistill,0.1,", "codistill,0.5,"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
    assert!(tmp.path().join("cmp/compare_distillation.csv").exists());
}

#[test]
fn out_root_env_var_anchors_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, 1);
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--output", "nested/run"])
        .env("HNE_OUT_ROOT", tmp.path()));
    assert!(tmp.path().join("nested/run/metrics.csv").exists());
}

#[test]
fn bundled_toy_config_parses() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_b4.json");
    let text = fs::read_to_string(root).unwrap();
    let cfg: hne::ExperimentConfig = serde_json::from_str(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.tree.depth, 4);
    assert_eq!(cfg.train.epochs, 30);
}

#[test]
fn bundled_cifar_config_parses() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cifar10_b4.json");
    let text = fs::read_to_string(root).unwrap();
    let cfg: hne::ExperimentConfig = serde_json::from_str(&text).unwrap();
    cfg.validate().unwrap();
}
