//! End-to-end CLI checks: subcommand wiring, report files, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rgfm_core::pipeline::{RunConfig, Stage1Hyper, Stage2Hyper, Task};
use rgfm_core::synth::{stochastic_block_graph, SbmConfig};

fn rgfm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rgfm"))
}

fn write_graph(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let mut cfg = SbmConfig::homophilous(name, seed);
    cfg.nodes_per_block = 12;
    let g = stochastic_block_graph(&cfg);
    let path = dir.join(format!("{name}.graph"));
    rgfm_core::graphio::save_graph(&g, &path).unwrap();
    path
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = RunConfig {
        sources: vec![write_graph(dir, "s1", 21), write_graph(dir, "s2", 22)],
        target: write_graph(dir, "t", 23),
        d_in: 16,
        d: 8,
        k_cap: 2,
        router_hidden: 8,
        stage1: Stage1Hyper { epochs: 1, lr: 5e-3, weight_decay: 2e-6, batch_size: 16 },
        stage2: Stage2Hyper {
            epochs: 2,
            lr: 1e-2,
            weight_decay: 2e-6,
            batch_size: 16,
            lb_weight: 0.01,
        },
        max_centers_per_graph: 8,
        query_cap: 10,
        shots: 1,
        seeds: vec![0],
        task: Task::Node,
        threads: 1,
        seed: 3,
        ..RunConfig::default()
    };
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let ckpt1 = dir.path().join("stage1.ckpt");
    let ckpt2 = dir.path().join("stage2.ckpt");
    let trace = dir.path().join("routing.csv");

    let out = rgfm()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&ckpt1)
        .output()
        .unwrap();
    assert_success(&out);
    assert!(ckpt1.exists());

    let out = rgfm()
        .args(["stage2", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt1)
        .arg("--out")
        .arg(&ckpt2)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert_success(&out);
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("epoch,conf,m_effective"), "trace header: {csv}");
    assert_eq!(csv.lines().count(), 3, "two epochs plus header");

    let report_path = dir.path().join("node.json");
    let out = rgfm()
        .args(["eval-node", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt2)
        .arg("--json")
        .arg(&report_path)
        .output()
        .unwrap();
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["metric"], "accuracy");
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean"), "human table missing: {stdout}");

    let out = rgfm()
        .args(["eval-link", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt2)
        .args(["--seeds", "2"])
        .output()
        .unwrap();
    assert_success(&out);

    let out = rgfm()
        .args(["robustness", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt2)
        .args(["--kind", "node_mask", "--levels", "0,0.5"])
        .output()
        .unwrap();
    assert_success(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("level"), "{table}");

    let out = rgfm()
        .args(["inspect-gog", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt2)
        .args(["--center", "0"])
        .output()
        .unwrap();
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("GOG 0 "));
}

#[test]
fn oracle_subcommands_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    for (which, extra) in [
        ("noise", vec!["--configs", "5"]),
        ("gog-error", vec!["--configs", "3", "--mc-samples", "20000"]),
        ("excess-risk", vec![]),
    ] {
        let json = dir.path().join(format!("{which}.json"));
        let mut cmd = rgfm();
        cmd.args(["oracle", which]).arg("--json").arg(&json).args(&extra);
        let out = cmd.output().unwrap();
        assert_success(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed["pass"], true, "{which} report: {parsed}");
    }
}

#[test]
fn exit_codes_distinguish_config_and_budget_errors() {
    let dir = tempfile::tempdir().unwrap();

    // Unparseable config: exit 2.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ nope").unwrap();
    let out = rgfm().args(["pretrain", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing source file: exit 2.
    let missing = dir.path().join("missing.json");
    std::fs::write(&missing, r#"{"sources": ["/nonexistent.graph"], "target": "x"}"#).unwrap();
    let out = rgfm().args(["pretrain", "--config"]).arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Budget below the 1-hop cost: exit 3.
    let config = write_config(dir.path());
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    cfg["byte_budget"] = serde_json::json!(16);
    let tiny = dir.path().join("tiny_budget.json");
    std::fs::write(&tiny, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = rgfm().args(["pretrain", "--config"]).arg(&tiny).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
