mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{write_config, SMALL_CLASSIFY};

fn adafish(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adafish"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

#[test]
fn train_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "det", "synthetic-classify", "adafish", SMALL_CLASSIFY);
    let csv = dir.path().join("runs/det.metrics.csv");
    let first = adafish(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let a = std::fs::read(&csv).unwrap();
    let second = adafish(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(a, std::fs::read(&csv).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(adafish(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(adafish(&["plot", "--out", "x.svg"], dir.path()).status.code(), Some(1));
    assert_eq!(adafish(&["verify", "--suite", "nope"], dir.path()).status.code(), Some(1));
    assert_eq!(adafish(&["--help"], dir.path()).status.code(), Some(0));

    let bad = write_config(dir.path(), "bad", "synthetic-classify", "adafish", "mystery = 1");
    assert_eq!(adafish(&["train", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));

    let div = write_config(
        dir.path(),
        "div",
        "synthetic-lowrank-regress",
        "sgd",
        "epochs = 3\nfull_batch = true\n[hyperparams]\neta0 = 1e200\n",
    );
    assert_eq!(adafish(&["train", "--config", div.to_str().unwrap()], dir.path()).status.code(), Some(3));
}

#[test]
fn verify_suites_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let ok = adafish(&["verify", "--suite", "linalg"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("check=")).all(|l| l.ends_with("result=PASS")));

    let bad = adafish(&["verify", "--suite", "linalg", "--mutate-smw"], dir.path());
    assert_eq!(bad.status.code(), Some(4));
    let text = String::from_utf8(bad.stdout).unwrap();
    let smw = text.lines().find(|l| l.starts_with("check=smw_vs_dense_inverse")).unwrap();
    assert!(smw.ends_with("result=FAIL"), "{smw}");

    let fisher = adafish(&["verify", "--suite", "fisher"], dir.path());
    assert_eq!(fisher.status.code(), Some(0));
    let text = String::from_utf8(fisher.stdout).unwrap();
    assert!(text.contains("check=lemma1_decay_exponent_min"));
}

#[test]
fn compare_and_plot_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = dir.path().join("cfgs");
    std::fs::create_dir(&cfgs).unwrap();
    write_config(&cfgs, "adafish", "synthetic-classify", "adafish", SMALL_CLASSIFY);
    write_config(&cfgs, "adamw", "synthetic-classify", "adamw", SMALL_CLASSIFY);
    let out = adafish(
        &["compare", "--config-dir", cfgs.to_str().unwrap(), "--seeds", "2", "--out", "cmp"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.starts_with("baseline: adamw"));
    let csv = std::fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let plot = adafish(
        &[
            "plot",
            "--out",
            "p.svg",
            "cmp/adafish.seed0.metrics.csv",
            "cmp/adamw.seed0.metrics.csv",
        ],
        dir.path(),
    );
    assert_eq!(plot.status.code(), Some(0), "{}", String::from_utf8_lossy(&plot.stderr));
    let svg = std::fs::read_to_string(dir.path().join("p.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}
