//! Experiment configuration files (TOML, `schema_version = 1`).
//!
//! ```toml
//! schema_version = 1
//! task = "synthetic-classify"      # or synthetic-lowrank-regress, csv-classify
//! optimizer = "adafish"            # or adamw, sgd
//! seed = 0
//! epochs = 100
//! batch_size = 32
//! output_prefix = "runs/classify"  # relative to the config file
//! full_batch = false               # one step per epoch over the whole train split
//! log_every_step = false
//! wall_clock = false               # record elapsed ms (breaks byte-determinism)
//! train_biases = false
//!
//! [model]
//! hidden = []                      # hidden widths between input and output
//! rank = 4
//! activation = "tanh"
//! scale = 1.0
//! v_init_std = 0.02
//!
//! [data]
//! num_samples = 1000
//! input_dim = 64
//! outputs = 10                     # classes, or regression outputs
//! rank_star = 4
//! base_gain = 1.0
//! perturbation_scale = 1.0
//! test_fraction = 0.2
//! csv_path = "data.csv"            # csv-classify only
//! label_column = "label"
//!
//! [hyperparams]                    # every key optional; defaults per optimizer
//! eta0 = 0.1
//! eta_min = 0.0
//! lambda = 0.1
//! gamma = 2e-4
//! beta1 = 0.8
//! beta2 = 0.99
//! delta = 1e-15
//! schedule = "cosine"
//! bias_correction = false          # sgd only
//! max_gram_dim = 64
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use adafish::lora::Activation;
use adafish::optim::{Hyperparams, OptimizerKind, ParamPolicy, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SyntheticClassify,
    SyntheticLowrankRegress,
    CsvClassify,
}

impl Task {
    pub fn is_regression(self) -> bool {
        matches!(self, Task::SyntheticLowrankRegress)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adafish,
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "default_v_std")]
    pub v_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            rank: default_rank(),
            activation: default_activation(),
            scale: 1.0,
            v_init_std: default_v_std(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_outputs")]
    pub outputs: usize,
    #[serde(default = "default_rank")]
    pub rank_star: usize,
    #[serde(default = "one")]
    pub base_gain: f64,
    #[serde(default = "one")]
    pub perturbation_scale: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default)]
    pub label_column: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_samples: default_samples(),
            input_dim: default_input_dim(),
            outputs: default_outputs(),
            rank_star: default_rank(),
            base_gain: 1.0,
            perturbation_scale: 1.0,
            test_fraction: default_test_fraction(),
            csv_path: None,
            label_column: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamOverrides {
    pub eta0: Option<f64>,
    pub eta_min: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub delta: Option<f64>,
    pub schedule: Option<String>,
    pub bias_correction: Option<bool>,
    pub max_gram_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub optimizer: OptimizerChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub output_prefix: PathBuf,
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default)]
    pub log_every_step: bool,
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub train_biases: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub hyperparams: HyperparamOverrides,
}

fn default_rank() -> usize {
    4
}
fn default_activation() -> String {
    "tanh".into()
}
fn one() -> f64 {
    1.0
}
fn default_v_std() -> f64 {
    adafish::lora::DEFAULT_V_STD
}
fn default_samples() -> usize {
    1000
}
fn default_input_dim() -> usize {
    64
}
fn default_outputs() -> usize {
    10
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative `output_prefix` and
    /// `csv_path` are resolved against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::config(path, e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|msg| HarnessError::config(path, msg))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_prefix.is_relative() {
            cfg.output_prefix = base.join(&cfg.output_prefix);
        }
        if let Some(csv) = &cfg.data.csv_path {
            if csv.is_relative() {
                cfg.data.csv_path = Some(base.join(csv));
            }
        }
        cfg.validate().map_err(|msg| HarnessError::config(path, msg))?;
        Ok(cfg)
    }

    /// Parses without validating or resolving paths.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn activation(&self) -> std::result::Result<Activation, String> {
        self.model.activation.parse().map_err(|e: adafish::Error| e.to_string())
    }

    /// Layer widths from input to output. For `csv-classify` the ends come
    /// from the data, so the given dimensions are used.
    pub fn layer_dims(&self, input_dim: usize, outputs: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.model.hidden);
        dims.push(outputs);
        dims
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adafish => OptimizerKind::AdaFish,
            OptimizerChoice::Adamw => OptimizerKind::AdamW,
            OptimizerChoice::Sgd => {
                if self.hyperparams.bias_correction.unwrap_or(false) {
                    OptimizerKind::Momentum
                } else {
                    OptimizerKind::Sgd
                }
            }
        }
    }

    pub fn policy(&self) -> ParamPolicy {
        let mut p = ParamPolicy::new(self.optimizer_kind());
        if let Some(m) = self.hyperparams.max_gram_dim {
            p.max_gram_dim = m;
        }
        p
    }

    /// Optimizer defaults overlaid with the `[hyperparams]` table.
    pub fn resolved_hyperparams(&self, total_steps: u64) -> std::result::Result<Hyperparams, String> {
        let mut hp = match self.optimizer {
            OptimizerChoice::Adafish => Hyperparams::adafish_default(total_steps),
            OptimizerChoice::Adamw | OptimizerChoice::Sgd => Hyperparams::adamw_default(total_steps),
        };
        let o = &self.hyperparams;
        if let Some(v) = o.eta0 {
            hp.eta0 = v;
        }
        if let Some(v) = o.eta_min {
            hp.eta_min = v;
        }
        if let Some(v) = o.lambda {
            hp.lambda = v;
        }
        if let Some(v) = o.gamma {
            hp.gamma = v;
        }
        if let Some(v) = o.beta1 {
            hp.beta1 = v;
        }
        if let Some(v) = o.beta2 {
            hp.beta2 = v;
        }
        if let Some(v) = o.delta {
            hp.delta = v;
        }
        if let Some(s) = &o.schedule {
            hp.schedule = s.parse::<Schedule>().map_err(|e| e.to_string())?;
        }
        hp.validate().map_err(|e| e.to_string())?;
        Ok(hp)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.model.rank == 0 {
            return Err("model.rank must be at least 1".into());
        }
        if !(self.model.scale.is_finite()) {
            return Err("model.scale must be finite".into());
        }
        if !(self.model.v_init_std.is_finite() && self.model.v_init_std >= 0.0) {
            return Err("model.v_init_std must be finite and >= 0".into());
        }
        self.activation()?;
        if self.model.hidden.contains(&0) {
            return Err("model.hidden widths must be positive".into());
        }
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(format!("data.test_fraction must lie in (0, 1), got {}", d.test_fraction));
        }
        if !(d.base_gain.is_finite() && d.base_gain >= 0.0 && d.perturbation_scale.is_finite() && d.perturbation_scale >= 0.0) {
            return Err("data.base_gain and data.perturbation_scale must be >= 0".into());
        }
        if self.hyperparams.bias_correction.is_some() && self.optimizer != OptimizerChoice::Sgd {
            return Err("hyperparams.bias_correction only applies to optimizer = \"sgd\"".into());
        }
        match self.task {
            Task::CsvClassify => {
                if d.csv_path.is_none() {
                    return Err("csv-classify needs data.csv_path".into());
                }
            }
            Task::SyntheticClassify | Task::SyntheticLowrankRegress => {
                if d.csv_path.is_some() || d.label_column.is_some() {
                    return Err("data.csv_path and data.label_column only apply to csv-classify".into());
                }
                if d.num_samples < 2 {
                    return Err("data.num_samples must be at least 2".into());
                }
                if d.input_dim == 0 || d.outputs == 0 {
                    return Err("data.input_dim and data.outputs must be positive".into());
                }
                if self.task == Task::SyntheticClassify && d.outputs < 2 {
                    return Err("classification needs at least 2 classes".into());
                }
                let dims = self.layer_dims(d.input_dim, d.outputs);
                let min_dim = dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
                if self.model.rank > min_dim {
                    return Err(format!("model.rank {} exceeds the smallest layer side {min_dim}", self.model.rank));
                }
                if d.rank_star > min_dim {
                    return Err(format!("data.rank_star {} exceeds the smallest layer side {min_dim}", d.rank_star));
                }
            }
        }
        self.resolved_hyperparams(1)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
task = "synthetic-classify"
optimizer = "adafish"
output_prefix = "out/run"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.model.rank, 4);
        assert_eq!(c.data.input_dim, 64);
        assert_eq!(c.data.outputs, 10);
        let hp = c.resolved_hyperparams(10).unwrap();
        assert_eq!(hp, Hyperparams::adafish_default(10));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nlearning_rate = 0.1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        let text = format!("{MINIMAL}\n[hyperparams]\nmomentum = 0.9\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let c = ExperimentConfig::from_toml_str(&MINIMAL.replace("schema_version = 1", "schema_version = 2")).unwrap();
        assert!(c.validate().unwrap_err().contains("schema_version"));
    }

    #[test]
    fn overrides_apply() {
        let text = format!("{MINIMAL}\n[hyperparams]\ngamma = 0.0\ndelta = 1.0\nschedule = \"constant\"\n");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let hp = c.resolved_hyperparams(5).unwrap();
        assert_eq!((hp.gamma, hp.delta, hp.schedule), (0.0, 1.0, Schedule::Constant));
    }

    #[test]
    fn bad_values_fail_validation() {
        for extra in [
            "batch_size = 0",
            "[model]\nrank = 11",
            "[model]\nactivation = \"gelu\"",
            "[hyperparams]\nbeta1 = 1.5",
            "[hyperparams]\nbias_correction = true",
            "[data]\ncsv_path = \"x.csv\"",
        ] {
            let text = format!("{MINIMAL}\n{extra}\n");
            let c = ExperimentConfig::from_toml_str(&text).unwrap();
            assert!(c.validate().is_err(), "{extra}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
