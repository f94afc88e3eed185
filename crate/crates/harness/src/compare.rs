//! Multi-config, multi-seed comparison against a baseline config.
//!
//! For each seed the target loss is the baseline's final training loss; a
//! run's epochs-to-target is the first logged epoch whose loss is at or below
//! it, or `epochs + 1` when never reached. The epoch ratio of a config is
//! `median(baseline epochs-to-target) / median(config epochs-to-target)`,
//! or 1 when the two medians are equal.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adafish::linalg::format_f64;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, OptimizerChoice};
use crate::error::{HarnessError, Result};
use crate::train::{train, MetricsRecord, RunStatus};

/// One config loaded from the comparison directory.
#[derive(Clone, Debug)]
pub struct NamedConfig {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Loads every `*.toml` in `dir`, sorted by file name.
pub fn load_config_dir(dir: &Path) -> Result<Vec<NamedConfig>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Usage(format!("no .toml configs in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            Ok(NamedConfig {
                name: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                config: ExperimentConfig::from_path(p)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub config: String,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    /// Training loss at the end of each epoch, index 0 before training.
    pub epoch_losses: Vec<f64>,
    pub target_loss: f64,
    pub epochs_to_target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub config: String,
    pub runs: usize,
    pub diverged: usize,
    pub median_final_loss: f64,
    /// Seeds where this config's final loss is strictly below the baseline's.
    pub wins_vs_baseline: usize,
    pub median_epochs_to_target: f64,
    pub epoch_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRow>,
    pub summaries: Vec<ConfigSummary>,
}

/// Last logged loss of each epoch, indexed by epoch.
pub fn epoch_losses(records: &[MetricsRecord], epochs: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; epochs + 1];
    for r in records {
        if r.epoch <= epochs {
            out[r.epoch] = r.train_loss;
        }
    }
    out
}

/// First epoch with loss `<= target`; `losses.len()` (= epochs + 1) if none.
pub fn epochs_to_target(losses: &[f64], target: f64) -> usize {
    losses.iter().position(|&l| l <= target).unwrap_or(losses.len())
}

/// `baseline / config`, taken as 1 when the medians are equal (including 0/0).
pub fn epoch_ratio(baseline_median: f64, config_median: f64) -> f64 {
    if baseline_median == config_median {
        1.0
    } else {
        baseline_median / config_median
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Picks the baseline: the named config, else the first AdamW config, else
/// the first config.
pub fn baseline_index(configs: &[NamedConfig], name: Option<&str>) -> Result<usize> {
    if let Some(n) = name {
        return configs
            .iter()
            .position(|c| c.name == n)
            .ok_or_else(|| HarnessError::Usage(format!("baseline {n:?} is not among the configs")));
    }
    Ok(configs
        .iter()
        .position(|c| c.config.optimizer == OptimizerChoice::Adamw)
        .unwrap_or(0))
}

/// Runs every config over seeds `0..seeds`, writing each run's artifacts
/// under `out_dir` as `{name}.seed{s}.*`, then `comparison.csv` and
/// `comparison_summary.txt`.
pub fn compare(configs: &[NamedConfig], seeds: u64, baseline: Option<&str>, out_dir: &Path) -> Result<ComparisonReport> {
    if seeds == 0 {
        return Err(HarnessError::Usage("--seeds must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let base_idx = baseline_index(configs, baseline)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| (0..seeds).map(move |s| (c, s))).collect();
    let finished: Vec<Result<(Vec<f64>, bool, f64)>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let named = &configs[c];
            let mut cfg = named.config.clone();
            cfg.seed = seed;
            cfg.output_prefix = out_dir.join(format!("{}.seed{seed}", named.name));
            let outcome = train(&cfg)?;
            let losses = epoch_losses(&outcome.records, cfg.epochs);
            let diverged = matches!(outcome.status, RunStatus::Diverged { .. });
            Ok((losses, diverged, outcome.diagnostics.final_test_accuracy))
        })
        .collect();
    let mut results = Vec::with_capacity(finished.len());
    for r in finished {
        results.push(r?);
    }
    let final_loss = |losses: &[f64], diverged: bool| {
        let l = losses.iter().rev().copied().find(|x| !x.is_nan()).unwrap_or(f64::INFINITY);
        if diverged || !l.is_finite() {
            f64::INFINITY
        } else {
            l
        }
    };

    let n_seeds = seeds as usize;
    let mut rows = Vec::with_capacity(jobs.len());
    for (j, &(c, seed)) in jobs.iter().enumerate() {
        let (losses, diverged, acc) = &results[j];
        let (base_losses, base_div, _) = &results[base_idx * n_seeds + seed as usize];
        let target = final_loss(base_losses, *base_div);
        let ett = if *diverged {
            losses.len()
        } else {
            epochs_to_target(losses, target)
        };
        rows.push(RunRow {
            config: configs[c].name.clone(),
            optimizer: configs[c].config.optimizer,
            seed,
            diverged: *diverged,
            final_train_loss: final_loss(losses, *diverged),
            final_test_accuracy: *acc,
            epoch_losses: losses.clone(),
            target_loss: target,
            epochs_to_target: ett,
        });
    }

    let per_config = |c: usize| &rows[c * n_seeds..(c + 1) * n_seeds];
    let base_ett: Vec<f64> = per_config(base_idx).iter().map(|r| r.epochs_to_target as f64).collect();
    let base_median = median(&base_ett);
    let summaries = (0..configs.len())
        .map(|c| {
            let rs = per_config(c);
            let ett: Vec<f64> = rs.iter().map(|r| r.epochs_to_target as f64).collect();
            let losses: Vec<f64> = rs.iter().map(|r| r.final_train_loss).collect();
            let wins = rs
                .iter()
                .zip(per_config(base_idx))
                .filter(|(r, b)| r.final_train_loss < b.final_train_loss)
                .count();
            let med = median(&ett);
            ConfigSummary {
                config: configs[c].name.clone(),
                runs: rs.len(),
                diverged: rs.iter().filter(|r| r.diverged).count(),
                median_final_loss: median(&losses),
                wins_vs_baseline: wins,
                median_epochs_to_target: med,
                epoch_ratio: epoch_ratio(base_median, med),
            }
        })
        .collect();

    let report = ComparisonReport {
        baseline: configs[base_idx].name.clone(),
        seeds: (0..seeds).collect(),
        rows,
        summaries,
    };
    let csv_path = out_dir.join("comparison.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| HarnessError::io(&csv_path, e))?;
    let summary_path = out_dir.join("comparison_summary.txt");
    std::fs::write(&summary_path, report.summary_table()).map_err(|e| HarnessError::io(&summary_path, e))?;
    Ok(report)
}

fn optimizer_name(o: OptimizerChoice) -> &'static str {
    match o {
        OptimizerChoice::Adafish => "adafish",
        OptimizerChoice::Adamw => "adamw",
        OptimizerChoice::Sgd => "sgd",
    }
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "config,optimizer,seed,status,final_train_loss,final_test_accuracy,target_loss,epochs_to_target\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.config,
                optimizer_name(r.optimizer),
                r.seed,
                if r.diverged { "diverged" } else { "completed" },
                format_f64(r.final_train_loss),
                format_f64(r.final_test_accuracy),
                format_f64(r.target_loss),
                r.epochs_to_target
            );
        }
        s
    }

    pub fn summary(&self, config: &str) -> Option<&ConfigSummary> {
        self.summaries.iter().find(|s| s.config == config)
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!("baseline: {}  seeds: {}\n", self.baseline, self.seeds.len());
        let _ = writeln!(
            s,
            "{:<24} {:>5} {:>8} {:>14} {:>6} {:>10} {:>11}",
            "config", "runs", "diverged", "median_loss", "wins", "median_ett", "epoch_ratio"
        );
        for c in &self.summaries {
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>8} {:>14.6e} {:>6} {:>10.1} {:>11.4}",
                c.config,
                c.runs,
                c.diverged,
                c.median_final_loss,
                format!("{}/{}", c.wins_vs_baseline, c.runs),
                c.median_epochs_to_target,
                c.epoch_ratio
            );
        }
        s
    }
}
