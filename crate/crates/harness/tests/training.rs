mod common;

use adafish::lora::Targets;
use adafish_harness::compare::{compare, load_config_dir, NamedConfig};
use adafish_harness::config::ExperimentConfig;
use adafish_harness::data::{dataset_for, make_synthetic_dataset, SyntheticKind, SyntheticSpec};
use adafish_harness::train::{run, running_dyn_average, train, ConvergenceDiagnostics, RunStatus};
use common::{increase_windows, load, write_config, SMALL_CLASSIFY};

#[test]
fn zero_epochs_logs_only_the_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&write_config(dir.path(), "e0", "synthetic-classify", "adafish", &SMALL_CLASSIFY.replace("epochs = 3", "epochs = 0")));
    let data = dataset_for(&cfg).unwrap();
    let student = adafish_harness::data::make_student(&data.base, &cfg).unwrap();
    let out = train(&cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].step, 0);
    assert_eq!(out.model, student);
    let text = std::fs::read_to_string(dir.path().join("runs/e0.metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn records_are_monotone_and_diagnostics_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("log_every_step = true\n{SMALL_CLASSIFY}");
    let cfg = load(&write_config(dir.path(), "m", "synthetic-classify", "adafish", &body));
    let out = train(&cfg).unwrap();
    let steps_per_epoch = 96usize.div_ceil(16) as u64;
    assert_eq!(out.records.len() as u64, 1 + 3 * steps_per_epoch);
    for w in out.records.windows(2) {
        assert!((w[1].epoch, w[1].step) > (w[0].epoch, w[0].step));
    }
    let mean: f64 = out.records.iter().map(|r| r.dyn_grad_norm_sq).sum::<f64>() / out.records.len() as f64;
    let d = &out.diagnostics;
    assert!((d.running_avg_dyn_grad_norm_sq - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    let (avg, _) = ConvergenceDiagnostics::from_records(&out.records);
    assert_eq!(avg, d.running_avg_dyn_grad_norm_sq);
    assert!(d.frozen_base_ok);
    assert_eq!(d.status, RunStatus::Completed);
    assert!(d.dg_estimate > 0.0 && d.grad_variance_estimate >= 0.0);
    let json = std::fs::read_to_string(dir.path().join("runs/m.diagnostics.json")).unwrap();
    assert!(json.contains("\"frozen_base_ok\": true"));
    assert!(dir.path().join("runs/m.ckpt").exists());
}

#[test]
fn checkpoint_restores_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&write_config(dir.path(), "c", "synthetic-classify", "adafish", SMALL_CLASSIFY));
    let out = train(&cfg).unwrap();
    let ck = adafish::checkpoint::Checkpoint::load(dir.path().join("runs/c.ckpt")).unwrap();
    assert_eq!(ck, out.checkpoint());
}

#[test]
fn zero_rank_star_teacher_is_the_base_model() {
    let spec = SyntheticSpec {
        kind: SyntheticKind::Classify,
        dims: vec![10, 4],
        rank_star: 0,
        num_samples: 60,
        test_fraction: 0.2,
        base_gain: 1.0,
        perturbation_scale: 1.0,
        activation: adafish::lora::Activation::Tanh,
    };
    let data = make_synthetic_dataset(&spec, 3).unwrap();
    let teacher = data.teacher.as_ref().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&write_config(dir.path(), "z", "synthetic-classify", "adafish", "[data]\ninput_dim = 10\noutputs = 4\nrank_star = 0\nnum_samples = 60\n[model]\nrank = 2\n"));
    let student = adafish_harness::data::make_student(&data.base, &cfg).unwrap();
    let x = &data.train.x;
    assert_eq!(student.predict(x).unwrap(), teacher.predict(x).unwrap());
    assert_eq!(student.loss(&data.train).unwrap(), teacher.loss(&data.train).unwrap());
}

#[test]
fn regression_target_is_realizable() {
    let dir = tempfile::tempdir().unwrap();
    let body = "epochs = 500\nfull_batch = true\n[hyperparams]\nlambda = 0.0\ngamma = 1.0\ndelta = 1e-8\n";
    let cfg = load(&write_config(dir.path(), "r", "synthetic-lowrank-regress", "adafish", body));
    assert!(cfg.model.rank >= cfg.data.rank_star);
    let out = train(&cfg).unwrap();
    assert_eq!(out.diagnostics.steps, 500);
    // the loss is half the per-sample squared error
    let mse = 2.0 * out.diagnostics.final_train_loss / cfg.data.outputs as f64;
    assert!(mse <= 1e-4, "mse {mse:e}");
}

#[test]
fn running_average_trend_after_epoch_five() {
    let dir = tempfile::tempdir().unwrap();
    let body = "epochs = 400\nfull_batch = true\n[data]\nrank_star = 1\n[hyperparams]\nlambda = 0.0\ngamma = 1.0\ndelta = 1.0\nschedule = \"constant\"\n";
    let base = load(&write_config(dir.path(), "t", "synthetic-lowrank-regress", "adafish", body));
    for seed in 0..10 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = dataset_for(&cfg).unwrap();
        let out = run(&cfg, &data, None).unwrap();
        let avg = running_dyn_average(&out.records);
        let windows = increase_windows(&avg, 5);
        assert!(windows <= 1, "seed {seed}: {windows} windows");
    }
}

#[test]
fn unit_preconditioner_trajectory_matches_momentum() {
    let dir = tempfile::tempdir().unwrap();
    let hp = "eta0 = 0.05\nlambda = 0.01\nbeta1 = 0.8\n";
    let a = load(&write_config(dir.path(), "a", "synthetic-classify", "adafish", &format!("{SMALL_CLASSIFY}[hyperparams]\n{hp}gamma = 0.0\ndelta = 1.0\n")));
    let b = load(&write_config(dir.path(), "b", "synthetic-classify", "sgd", &format!("{SMALL_CLASSIFY}[hyperparams]\n{hp}bias_correction = true\n")));
    let data = dataset_for(&a).unwrap();
    let ra = run(&a, &data, None).unwrap();
    let rb = run(&b, &data, None).unwrap();
    assert_eq!(ra.records.len(), rb.records.len());
    for (x, y) in ra.records.iter().zip(&rb.records) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-12, "{} vs {}", x.train_loss, y.train_loss);
    }
}

#[test]
fn comparing_a_config_with_itself_gives_ratio_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = dir.path().join("cfgs");
    std::fs::create_dir(&cfgs).unwrap();
    write_config(&cfgs, "only", "synthetic-classify", "adafish", SMALL_CLASSIFY);
    let loaded = load_config_dir(&cfgs).unwrap();
    let twin = NamedConfig {
        name: "twin".into(),
        config: loaded[0].config.clone(),
    };
    let configs = vec![loaded[0].clone(), twin];
    let report = compare(&configs, 3, Some("only"), &dir.path().join("out")).unwrap();
    for s in &report.summaries {
        assert_eq!(s.epoch_ratio, 1.0, "{}", s.config);
    }
    assert_eq!(report.rows.len(), 6);
    assert!(dir.path().join("out/comparison.csv").exists());
    assert!(dir.path().join("out/comparison_summary.txt").exists());
}

#[test]
fn diverged_run_reports_status_and_keeps_csv() {
    let dir = tempfile::tempdir().unwrap();
    let body = "epochs = 5\nfull_batch = true\n[hyperparams]\neta0 = 1e200\n";
    let cfg = load(&write_config(dir.path(), "d", "synthetic-lowrank-regress", "sgd", body));
    let out = train(&cfg).unwrap();
    assert!(out.status.is_diverged());
    let text = std::fs::read_to_string(dir.path().join("runs/d.metrics.csv")).unwrap();
    assert!(text.lines().count() >= 2);
}

#[test]
fn regression_scores_use_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: ExperimentConfig = load(&write_config(dir.path(), "v", "synthetic-lowrank-regress", "adamw", "epochs = 1"));
    let data = dataset_for(&cfg).unwrap();
    assert!(matches!(data.train.targets, Targets::Values(_)));
}
