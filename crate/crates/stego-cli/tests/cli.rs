//! End-to-end tests of the `stego` binary: argument handling, the full
//! dataset → train → translate → evaluate pipeline, and seed resolution.

use std::path::Path;
use std::process::{Command, Output};

fn stego() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stego"))
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

fn report_lines(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("report.txt"))
        .expect("report written")
        .lines()
        .map(str::to_owned)
        .collect()
}

fn metric(lines: &[String], key: &str) -> f64 {
    let prefix = format!("{key}=");
    lines
        .iter()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} in {lines:?}"))
        .parse()
        .expect("numeric metric")
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = stego().output().expect("binary runs");
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = stego()
        .args(["train", "--no-such-flag"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_prints_and_exits_zero() {
    let out = stego().arg("--help").output().expect("binary runs");
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
}

#[test]
fn runtime_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stego()
        .args([
            "translate",
            "--ckpt",
            tmp.path().join("missing.bin").to_str().unwrap(),
            "--in",
            tmp.path().to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn pipeline_from_dataset_to_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let world = root.join("world");
    let run = root.join("run");

    run_ok(stego().args([
        "build-dataset",
        "synthetic",
        "--out",
        world.to_str().unwrap(),
        "--resolution",
        "32",
        "--train-per-domain",
        "4",
        "--test-pairs",
        "2",
        "--ratio",
        "0.5",
        "--glyph-density",
        "2",
        "--seed",
        "3",
    ]));
    assert!(world.join("train.manifest").is_file());
    assert!(world.join("run.json").is_file());

    run_ok(stego().args([
        "train",
        "--data",
        world.join("train.manifest").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--base-width",
        "4",
        "--encoder-depth",
        "3",
        "--seed",
        "5",
    ]));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    assert!(run.join("loss_log.txt").is_file());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 5);
    assert_eq!(record["config"]["hp"]["epochs"], 1);

    let translated = root.join("translated");
    run_ok(stego().args([
        "translate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        world.join("test_x").to_str().unwrap(),
        "--out",
        translated.to_str().unwrap(),
    ]));
    for name in ["t_0000.png", "t_0001.png"] {
        assert!(translated.join(name).is_file(), "missing {name}");
    }

    let eval_gen = root.join("eval_gen");
    run_ok(stego().args([
        "evaluate",
        "--pred",
        translated.to_str().unwrap(),
        "--target",
        world.join("test_y").to_str().unwrap(),
        "--metrics",
        "rmse,acc,fpr",
        "--out",
        eval_gen.to_str().unwrap(),
    ]));
    let lines = report_lines(&eval_gen);
    assert!(metric(&lines, "rmse") >= 0.0);
    assert!(metric(&lines, "acc_sigma1") <= metric(&lines, "acc_sigma2"));
    assert!(metric(&lines, "pfpr") >= 0.0);
    assert!(metric(&lines, "ifpr") >= 0.0);

    // A set compared against itself is a fixed point of the paired metrics.
    let eval_self = root.join("eval_self");
    run_ok(stego().args([
        "evaluate",
        "--pred",
        world.join("test_y").to_str().unwrap(),
        "--target",
        world.join("test_y").to_str().unwrap(),
        "--metrics",
        "rmse,acc",
        "--out",
        eval_self.to_str().unwrap(),
    ]));
    let lines = report_lines(&eval_self);
    assert_eq!(metric(&lines, "rmse"), 0.0);
    assert_eq!(metric(&lines, "acc_sigma2"), 100.0);

    let eval_mask = root.join("eval_mask");
    run_ok(stego().args([
        "evaluate",
        "--pred",
        world.join("train_y").to_str().unwrap(),
        "--target",
        world.join("train_y").to_str().unwrap(),
        "--metrics",
        "mask",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--masks",
        world.join("train_y_masks").to_str().unwrap(),
        "--out",
        eval_mask.to_str().unwrap(),
    ]));
    let lines = report_lines(&eval_mask);
    let miou = metric(&lines, "miou");
    assert!((0.0..=100.0).contains(&miou));

    let probe = root.join("probe");
    run_ok(stego().args([
        "probe-stego",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--images",
        world.join("train_y").to_str().unwrap(),
        "--masks",
        world.join("train_y_masks").to_str().unwrap(),
        "--amplitudes",
        "0,0.02",
        "--out",
        probe.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(probe.join("probe.txt")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], "amplitude unmatchable_error matchable_error");
    assert!(rows[1].starts_with("0.000000 "));
    assert!(rows[2].starts_with("0.020000 "));

    let masks_out = root.join("masks_out");
    run_ok(stego().args([
        "export-masks",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        world.join("train_y").to_str().unwrap(),
        "--out",
        masks_out.to_str().unwrap(),
    ]));
    for k in 0..4 {
        assert!(masks_out.join(format!("y_{k:04}_mask.png")).is_file());
        assert!(masks_out.join(format!("y_{k:04}_consistency.png")).is_file());
    }
}

#[test]
fn seed_comes_from_flag_then_env_then_default() {
    let tmp = tempfile::tempdir().unwrap();
    let seed_of = |dir: &Path| -> serde_json::Value {
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        record["seed"].clone()
    };
    let base = [
        "build-dataset",
        "synthetic",
        "--resolution",
        "24",
        "--train-per-domain",
        "1",
        "--test-pairs",
        "1",
        "--glyph-density",
        "1",
    ];

    let from_env = tmp.path().join("from_env");
    run_ok(stego()
        .args(base)
        .args(["--out", from_env.to_str().unwrap()])
        .env("STEGO_SEED", "123"));
    assert_eq!(seed_of(&from_env), 123);

    let from_flag = tmp.path().join("from_flag");
    run_ok(stego()
        .args(base)
        .args(["--out", from_flag.to_str().unwrap(), "--seed", "9"])
        .env("STEGO_SEED", "123"));
    assert_eq!(seed_of(&from_flag), 9);

    let from_default = tmp.path().join("from_default");
    run_ok(stego()
        .args(base)
        .args(["--out", from_default.to_str().unwrap()])
        .env_remove("STEGO_SEED"));
    assert_eq!(seed_of(&from_default), 7);

    let bad_env = stego()
        .args(base)
        .args(["--out", tmp.path().join("bad").to_str().unwrap()])
        .env("STEGO_SEED", "not-a-number")
        .output()
        .expect("binary runs");
    assert_eq!(bad_env.status.code(), Some(2));
}
