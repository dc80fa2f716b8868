use std::fs;
use std::path::Path;

use embed_distill::cli::{expand_grid, run_from_args, COMPARISON_HEADER, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use embed_distill::config::{AblationAxis, AxisName, RunConfig};
use serde_json::json;

fn tiny_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let mut cfg = RunConfig::tiny();
    for s in &mut cfg.stages {
        s.max_steps = Some(steps);
    }
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn cli(args: &[&str]) -> i32 {
    run_from_args(std::iter::once("embed-distill").chain(args.iter().copied()))
}

#[test]
fn unknown_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = cli(&["train", "--set", "model.hidden_size=3", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!out.join("FAILED").exists());
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
    let missing = dir.path().join("nope.json");
    assert_eq!(cli(&["train", "--config", missing.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn probe_without_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    assert_eq!(cli(&["probe", "--out", out.to_str().unwrap()]), EXIT_RUNTIME);
    assert!(fs::read_to_string(out.join("FAILED")).unwrap().contains("checkpoints"));
}

#[test]
fn gen_data_train_probe_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(cli(&["gen-data", "--config", c, "--out", o]), EXIT_OK);
    for split in ["pt", "ift", "probe_train", "probe_eval"] {
        assert!(out.join("data").join(split).is_dir(), "{split}");
    }
    assert_eq!(cli(&["train", "--config", c, "--out", o]), EXIT_OK);
    assert!(out.join("checkpoints/stage1_IFT.edck").exists());
    assert_eq!(cli(&["probe", "--out", o, "--set", "probe.epochs=1"]), EXIT_OK);
    let csv = fs::read_to_string(out.join("probe/report.csv")).unwrap();
    assert!(csv.starts_with("layer,task,cosine,n\n"));
    assert_eq!(cli(&["report", "--out", o]), EXIT_OK);
    let losses = fs::read_to_string(out.join("report/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 4);
    assert!(out.join("report/probe_layers.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stages"]["PT"]["steps"], 2);

    // Probe overrides may not change the architecture.
    assert_eq!(cli(&["probe", "--out", o, "--set", "model.hidden=32"]), EXIT_CONFIG);
}

#[test]
fn invalid_axis_value_is_rejected_before_running() {
    let mut cfg = RunConfig::tiny();
    cfg.ablation.axes = vec![AblationAxis {
        axis: AxisName::TokenOrder,
        values: vec![json!("gsd"), json!("sideways")],
    }];
    let e = expand_grid(&cfg).unwrap_err().to_string();
    assert!(e.contains("ablation cell 1"), "{e}");
    cfg.ablation.axes[0].values.clear();
    assert!(expand_grid(&cfg).unwrap_err().to_string().contains("ablation.axes[0].values"));
}

#[test]
fn n_seek_grid_produces_three_cells_and_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    for s in &mut cfg.stages {
        s.max_steps = Some(1);
    }
    cfg.data.probe_train_items = 16;
    cfg.data.probe_eval_items = 8;
    cfg.probe.epochs = 1;
    cfg.ablation.axes = vec![AblationAxis { axis: AxisName::NSeek, values: vec![json!(0), json!(4), json!(8)] }];
    cfg.ablation.parallel_cells = true;
    let cells = expand_grid(&cfg).unwrap();
    assert_eq!(cells.iter().map(|c| c.config.distill.n_seek).collect::<Vec<_>>(), [0, 4, 8]);

    let p = dir.path().join("grid.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(cli(&["ablate", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
        fs::read_to_string(out.join("comparison.csv")).unwrap()
    };
    let a = run("a");
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], COMPARISON_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("cell_{i:03},n_seek={}", [0, 4, 8][i])), "{l}");
        let fields: Vec<&str> = l.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }
    assert!(dir.path().join("a/cell_002/probe/report.csv").exists());
    // Cells are independent of scheduling: a rerun is byte-identical.
    assert_eq!(a, run("b"));
}
