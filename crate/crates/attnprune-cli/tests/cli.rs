//! Black-box checks of the installed binary: output format, exit codes, and
//! the output-directory override.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnprune"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn count_reports_vgg16_totals() {
    let out = bin()
        .args(["count", "--arch", "vgg16", "--res", "224"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    // within the tables' two-decimal convention, including batch-norm params
    assert!(text.contains("params"), "{text}");
    assert!(text.contains("30.94B FLOPs"), "{text}");
    let millions: f64 = text
        .split('M')
        .next()
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((millions - 138.34).abs() / 138.34 < 0.005, "{millions}");
}

#[test]
fn fma_flag_halves_flops() {
    let grab = |extra: &[&str]| {
        let mut args = vec!["count", "--arch", "resnet18", "--res", "224"];
        args.extend_from_slice(extra);
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success());
        stdout(&out)
    };
    let plain = grab(&[]);
    let fused = grab(&["--fma"]);
    assert!(plain.contains("3.63B FLOPs"), "{plain}");
    assert!(fused.contains("1.81B FLOPs") || fused.contains("1.82B FLOPs"), "{fused}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let out = bin()
        .args(["count", "--arch", "vgg16", "--res", "224", "--no-such-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_failure_exits_1() {
    let out = bin()
        .args(["count", "--arch", "no_such_arch", "--res", "32"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

fn write_stats(path: &Path) {
    // two layers; values already normalized per layer
    let text = r#"{
  "sample_count": 10,
  "alpha": 0.5,
  "layers": [
    { "id": "conv2", "channels": 4, "a": [0.4, 0.3, 0.2, 0.1] },
    { "id": "conv3", "channels": 2, "a": [0.9, 0.1] }
  ],
  "per_class": null
}"#;
    std::fs::write(path, text).unwrap();
}

#[test]
fn solve_ratio_zero_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    write_stats(&stats);
    let masks = dir.path().join("masks.json");
    let out = bin()
        .args([
            "solve",
            "--stats",
            stats.to_str().unwrap(),
            "--ratio",
            "0.0",
            "--out",
            masks.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("t* = 0.000000"), "{text}");
    assert!(text.contains("achieved ratio = 0.000000"), "{text}");
    let saved = std::fs::read_to_string(masks).unwrap();
    assert!(!saved.contains("false"), "no channel should be dropped: {saved}");
}

#[test]
fn report_row_count_is_grid_plus_total_channels() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    write_stats(&stats);
    let csv = dir.path().join("report.csv");
    let out = bin()
        .args([
            "report",
            "--stats",
            stats.to_str().unwrap(),
            "--grid",
            "50",
            "--out",
            csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    let data_rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_rows, 50 + 4 + 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("curve,")).count(), 50);
    assert_eq!(text.lines().filter(|l| l.starts_with("stat,")).count(), 6);
}

#[test]
fn out_dir_env_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    write_stats(&stats);
    let redirect = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "report",
            "--stats",
            stats.to_str().unwrap(),
            "--grid",
            "10",
            "--out",
            "nested/report.csv",
        ])
        .env("ATTNPRUNE_OUT_DIR", redirect.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(redirect.path().join("nested/report.csv").exists());
    assert!(!dir.path().join("nested/report.csv").exists());
}

#[test]
fn solve_does_not_mutate_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    write_stats(&stats);
    let before = std::fs::read(&stats).unwrap();
    let out = bin()
        .args([
            "solve",
            "--stats",
            stats.to_str().unwrap(),
            "--ratio",
            "0.5",
            "--out",
            dir.path().join("masks.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&stats).unwrap(), before);
}
