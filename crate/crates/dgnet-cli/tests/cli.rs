//! End-to-end checks of the command-line surface via the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn dgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &[
    "--architecture.stages=1",
    "--architecture.nodes_per_stage=4",
    "--architecture.channels=[6]",
    "--architecture.image_size=8",
    "--dataset.classes=3",
    "--dataset.per_class=16",
    "--dataset.eval_per_class=8",
    "--training.epochs=2",
    "--training.batch_size=16",
];

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let mut args = vec!["--out", out_s, "train"];
    args.extend_from_slice(TINY);
    let res = dgnet(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("final eval accuracy"));
    for f in ["checkpoint.bin", "metrics.csv", "resolved_config.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let mut args = vec!["--out", out_s, "eval"];
    args.extend_from_slice(TINY);
    let res = dgnet(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("eval accuracy:"));
}

#[test]
fn eval_without_checkpoint_fails_with_one_line_cause() {
    let dir = tempfile::tempdir().unwrap();
    let res = dgnet(&["--out", dir.path().to_str().unwrap(), "eval"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("not found"));
}

#[test]
fn unknown_override_key_is_rejected() {
    let res = dgnet(&["train", "--training.no_such_field=1"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("no_such_field"), "{err}");
}

#[test]
fn config_file_and_override_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        "[training]\nepochs = 1\n[dataset]\nclasses = 3\nper_class = 8\neval_per_class = 4\n\
         [architecture]\nstages = 1\nnodes_per_stage = 3\nchannels = [4]\nimage_size = 8\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = dgnet(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "train",
        "--training.epochs=2",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("epochs = 2"), "override did not land:\n{resolved}");
}

#[test]
fn cost_prints_the_structured_report() {
    let res = dgnet(&["cost", "--training.mode=baseline"]);
    assert!(res.status.success());
    let out = String::from_utf8_lossy(&res.stdout);
    for field in ["params:", "multiadds_total:", "multiadds_router: 0", "router_share: 0.000000"] {
        assert!(out.contains(field), "missing {field} in:\n{out}");
    }
}

#[test]
fn export_graph_writes_dot_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("graphs");
    let mut args = vec!["--out", out.to_str().unwrap(), "export-graph", "--samples", "0,1"];
    args.extend_from_slice(TINY);
    let res = dgnet(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("edges.csv").is_file());
    assert!(out.join("sample0_stage0.dot").is_file());
    assert!(out.join("sample1_stage0.dot").is_file());
    let dot = std::fs::read_to_string(out.join("sample0_stage0.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("->"));
}

#[test]
fn ablate_emits_the_three_mode_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let mut args = vec!["--out", out.to_str().unwrap(), "ablate", "--seeds", "0"];
    args.extend_from_slice(TINY);
    let res = dgnet(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    for arm in ["baseline", "static_alpha", "dynamic"] {
        assert!(stdout.contains(arm), "missing {arm}:\n{stdout}");
    }
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("mode,seed,eval_acc"));
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(Path::new(&out.join("resolved_config.toml")).is_file());
}

#[test]
fn bad_seed_list_is_rejected() {
    let res = dgnet(&["ablate", "--seeds", "0,x"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad seed entry"));
}
