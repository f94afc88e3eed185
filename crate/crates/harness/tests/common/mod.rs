#![allow(dead_code)]

use std::path::{Path, PathBuf};

use adafish_harness::config::ExperimentConfig;

/// Writes `body` after the standard header and returns the file path.
pub fn write_config(dir: &Path, name: &str, task: &str, optimizer: &str, body: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    let text = format!(
        "schema_version = 1\ntask = \"{task}\"\noptimizer = \"{optimizer}\"\noutput_prefix = \"runs/{name}\"\n{body}\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub fn load(path: &Path) -> ExperimentConfig {
    ExperimentConfig::from_path(path).unwrap()
}

/// Small classification problem that trains in well under a second.
pub const SMALL_CLASSIFY: &str = "epochs = 3\nbatch_size = 16\n[data]\nnum_samples = 120\ninput_dim = 12\noutputs = 4\nrank_star = 2\n[model]\nrank = 2\n";

/// Maximal runs of consecutive increases of the running average after `skip` records.
pub fn increase_windows(running: &[f64], skip: usize) -> usize {
    let mut windows = 0;
    let mut inside = false;
    for i in (skip + 1)..running.len() {
        let up = running[i] > running[i - 1];
        if up && !inside {
            windows += 1;
        }
        inside = up;
    }
    windows
}
