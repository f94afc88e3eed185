mod common;

use std::path::PathBuf;

use adafish_harness::config::ExperimentConfig;
use adafish_harness::data::{column_stats, load_csv_dataset, read_csv_table};
use adafish_harness::error::HarnessError;
use adafish_harness::plot::{load_series, render_svg};
use adafish_harness::train::{MetricsRecord, METRICS_HEADER};
use common::write_config;

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "bad", "synthetic-classify", "adafish", "[model]\nwidth = 3\n");
    match ExperimentConfig::from_path(&p) {
        Err(e @ HarnessError::Config { .. }) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("width"), "{e}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "ok", "synthetic-classify", "adafish", "");
    let cfg = ExperimentConfig::from_path(&p).unwrap();
    assert_eq!(cfg.output_prefix, dir.path().join("runs/ok"));
}

#[test]
fn csv_three_rows_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "a,label,b\n1.5,0,-2\n0,1,3.25\n-1,2,1e-3\n").unwrap();
    let t = read_csv_table(&p, "label").unwrap();
    assert_eq!(t.feature_names, vec!["a", "b"]);
    assert_eq!(t.labels, vec![0, 1, 2]);
    assert_eq!(t.features.as_slice(), &[1.5, -2.0, 0.0, 3.25, -1.0, 1e-3]);
}

#[test]
fn csv_errors() {
    let dir = tempfile::tempdir().unwrap();
    let header_only = dir.path().join("h.csv");
    std::fs::write(&header_only, "a,label\n").unwrap();
    assert!(read_csv_table(&header_only, "label").unwrap_err().to_string().contains("no rows"));

    let missing = dir.path().join("m.csv");
    std::fs::write(&missing, "a,b\n1,2\n").unwrap();
    assert!(read_csv_table(&missing, "label").unwrap_err().to_string().contains("label"));

    let bad = dir.path().join("b.csv");
    std::fs::write(&bad, "a,label\n1,0\nx,1\n").unwrap();
    match read_csv_table(&bad, "label") {
        Err(HarnessError::Data { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("non-numeric"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_features_are_standardized_with_train_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    let mut text = String::from("x1,x2,label\n");
    for i in 0..50 {
        let x = i as f64;
        text.push_str(&format!("{},{},{}\n", 3.0 * x + 7.0, (x * 0.37).sin() * 100.0, i % 3));
    }
    std::fs::write(&p, text).unwrap();
    let (train, test, classes) = load_csv_dataset(&p, "label", 0.2, 4).unwrap();
    assert_eq!(classes, 3);
    assert_eq!(train.len() + test.len(), 50);
    let (mean, std) = column_stats(&train.x);
    for j in 0..2 {
        assert!(mean[j].abs() <= 1e-12, "mean {}", mean[j]);
        assert!((std[j] - 1.0).abs() <= 1e-9, "std {}", std[j]);
    }
}

fn write_metrics(path: &PathBuf, n: usize) {
    let mut text = format!("{METRICS_HEADER}\n");
    for i in 0..n {
        let r = MetricsRecord {
            epoch: i,
            step: 10 * i as u64,
            train_loss: 1.0 / (1 + i) as f64,
            test_accuracy: 0.1 * i as f64,
            grad_norm_sq: 1.0,
            dyn_grad_norm_sq: 1.0,
            step_vnorm_sq: 0.0,
            lr: 0.1,
            wall_ms: 0.0,
        };
        text.push_str(&r.to_csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn polylines<'a>(svg: &'a str, class: &str) -> Vec<&'a str> {
    let tag = format!("<polyline class=\"{class}\"");
    svg.lines()
        .filter(|l| l.starts_with(&tag))
        .map(|l| {
            let start = l.find("points=\"").unwrap() + 8;
            let end = start + l[start..].find('"').unwrap();
            &l[start..end]
        })
        .collect()
}

#[test]
fn plot_one_csv_two_records() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.metrics.csv");
    write_metrics(&p, 2);
    let svg = render_svg(&load_series(&[p]).unwrap());
    for class in ["loss", "accuracy"] {
        let lines = polylines(&svg, class);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].split(' ').count(), 2);
    }
}

#[test]
fn plot_two_csvs_lists_both_in_legend() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("adafish.metrics.csv");
    let b = dir.path().join("adamw.metrics.csv");
    write_metrics(&a, 4);
    write_metrics(&b, 3);
    let svg = render_svg(&load_series(&[a, b]).unwrap());
    assert_eq!(polylines(&svg, "loss").len(), 2);
    assert_eq!(polylines(&svg, "accuracy").len(), 2);
    let legend: Vec<&str> = svg.lines().filter(|l| l.contains("class=\"legend\"")).collect();
    assert_eq!(legend.len(), 2);
    assert!(legend[0].contains(">adafish.metrics.csv<"));
    assert!(legend[1].contains(">adamw.metrics.csv<"));
}

#[test]
fn plot_reports_malformed_csv_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, format!("{METRICS_HEADER}\n0,0,1,1,1,1,0,0.1\n")).unwrap();
    match load_series(std::slice::from_ref(&p)) {
        Err(HarnessError::Data { path, line, .. }) => {
            assert_eq!(path, p);
            assert_eq!(line, 2);
        }
        other => panic!("{other:?}"),
    }
}
