//! Synthetic teacher–student datasets and CSV loading.

use std::path::Path;

use adafish::linalg::SeededRng;
use adafish::lora::{Activation, Batch, LoraLinear, MlpModel, Targets};
use adafish::DenseMatrix;

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};

// Independent sub-streams of the run seed.
const STREAM_BASE: u64 = 1;
const STREAM_PERTURBATION: u64 = 2;
const STREAM_INPUTS: u64 = 3;
const STREAM_LABELS: u64 = 4;
const STREAM_SPLIT: u64 = 5;
pub(crate) const STREAM_STUDENT: u64 = 6;
/// Per-epoch shuffles use `STREAM_SHUFFLE + epoch`.
pub(crate) const STREAM_SHUFFLE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Classify,
    LowrankRegress,
}

/// Shape of a synthetic problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    pub rank_star: usize,
    pub num_samples: usize,
    pub test_fraction: f64,
    pub base_gain: f64,
    pub perturbation_scale: f64,
    pub activation: Activation,
}

impl SyntheticSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let kind = match cfg.task {
            Task::SyntheticClassify => SyntheticKind::Classify,
            Task::SyntheticLowrankRegress => SyntheticKind::LowrankRegress,
            Task::CsvClassify => return Err(HarnessError::Usage("csv-classify is not a synthetic task".into())),
        };
        Ok(Self {
            kind,
            dims: cfg.layer_dims(cfg.data.input_dim, cfg.data.outputs),
            rank_star: cfg.data.rank_star,
            num_samples: cfg.data.num_samples,
            test_fraction: cfg.data.test_fraction,
            base_gain: cfg.data.base_gain,
            perturbation_scale: cfg.data.perturbation_scale,
            activation: cfg.activation().map_err(HarnessError::Usage)?,
        })
    }
}

/// Train and held-out splits plus the model that generated them, if any.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub teacher: Option<MlpModel>,
    /// Frozen base weights, one per layer, shared by teacher and student.
    pub base: Vec<DenseMatrix>,
    pub num_classes: Option<usize>,
}

impl Dataset {
    pub fn is_regression(&self) -> bool {
        matches!(self.train.targets, Targets::Values(_))
    }

    pub fn input_dim(&self) -> usize {
        self.train.x.cols()
    }
}

/// Base weights `W0 ~ N(0, gain²/n_in)` for each layer.
pub fn base_weights(dims: &[usize], gain: f64, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = SeededRng::with_stream(seed, STREAM_BASE);
    dims.windows(2)
        .map(|w| rng.gaussian_matrix(w[0], w[1], 0.0, gain / (w[0] as f64).sqrt()))
        .collect()
}

/// Teacher with `ΔW* = U*ᵀV*` of rank `rank_star` on every layer, where
/// `U* ~ N(0, 1)` and `V* ~ N(0, scale²/(rank_star·n_in))`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.dims.len() < 2 {
        return Err(HarnessError::Usage("need at least an input and an output width".into()));
    }
    let min_dim = spec.dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
    if spec.rank_star > min_dim {
        return Err(HarnessError::Usage(format!(
            "rank_star {} exceeds the smallest layer side {min_dim}",
            spec.rank_star
        )));
    }
    let base = base_weights(&spec.dims, spec.base_gain, seed);
    let mut prng = SeededRng::with_stream(seed, STREAM_PERTURBATION);
    let r = spec.rank_star;
    let mut layers = Vec::with_capacity(base.len());
    for w0 in &base {
        let (n, k) = w0.shape();
        let u = prng.gaussian_matrix(r, n, 0.0, 1.0);
        let v_std = if r == 0 { 0.0 } else { spec.perturbation_scale / ((r * n) as f64).sqrt() };
        let v = prng.gaussian_matrix(r, k, 0.0, v_std);
        layers.push(LoraLinear::new(w0.clone(), u, v, 1.0)?);
    }
    let teacher = MlpModel::without_bias(layers, spec.activation)?;

    let mut xrng = SeededRng::with_stream(seed, STREAM_INPUTS);
    let x = xrng.gaussian_matrix(spec.num_samples, spec.dims[0], 0.0, 1.0);
    let out = teacher.predict(&x)?;
    let (targets, num_classes) = match spec.kind {
        SyntheticKind::Classify => {
            let mut lrng = SeededRng::with_stream(seed, STREAM_LABELS);
            let labels = (0..out.rows()).map(|i| sample_softmax(out.row(i), &mut lrng)).collect();
            (Targets::Classes(labels), Some(out.cols()))
        }
        SyntheticKind::LowrankRegress => (Targets::Values(out), None),
    };
    let all = Batch::new(x, targets)?;
    let (train, test) = split(&all, spec.test_fraction, seed);
    Ok(Dataset {
        train,
        test,
        teacher: Some(teacher),
        base,
        num_classes,
    })
}

fn sample_softmax(logits: &[f64], rng: &mut SeededRng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform() * total;
    for (c, wc) in w.iter().enumerate() {
        if u < *wc {
            return c;
        }
        u -= wc;
    }
    w.len() - 1
}

/// Seeded permutation split; the test side gets `round(N·fraction)` rows,
/// at least one and leaving at least one for training.
pub fn split(all: &Batch, test_fraction: f64, seed: u64) -> (Batch, Batch) {
    let n = all.len();
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::with_stream(seed, STREAM_SPLIT).shuffle(&mut idx);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let (test_idx, train_idx) = idx.split_at(n_test);
    (all.select(train_idx), all.select(test_idx))
}

/// Student over the frozen base: `U = 0`, `V ~ N(0, v_std²)`, zero biases.
pub fn make_student(base: &[DenseMatrix], cfg: &ExperimentConfig) -> Result<MlpModel> {
    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_STUDENT);
    let layers = base
        .iter()
        .map(|w0| LoraLinear::init(w0.clone(), cfg.model.rank, cfg.model.scale, cfg.model.v_init_std, &mut rng))
        .collect::<adafish::Result<Vec<_>>>()?;
    Ok(MlpModel::without_bias(layers, cfg.activation().map_err(HarnessError::Usage)?)?)
}

/// Parsed CSV before splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub feature_names: Vec<String>,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

/// Reads a headered numeric CSV. The label column holds non-negative
/// integer class ids; every other column is a feature.
pub fn read_csv_table(path: &Path, label_column: &str) -> Result<CsvTable> {
    let data_err = |line: usize, msg: String| HarnessError::Data {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => HarnessError::io(path, std::io::Error::other(e.to_string())),
            _ => data_err(1, e.to_string()),
        })?;
    let headers = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| data_err(1, format!("missing label column {label_column:?}")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            data_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (i, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if i == label_idx {
                let y: usize = cell
                    .parse()
                    .map_err(|_| data_err(line, format!("label {cell:?} is not a non-negative integer")))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| data_err(line, format!("non-numeric cell {cell:?} in column {}", headers[i].trim())))?;
                if !v.is_finite() {
                    return Err(data_err(line, format!("non-finite cell {cell:?}")));
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(data_err(1, "dataset has no rows".into()));
    }
    let features = DenseMatrix::new(labels.len(), feature_names.len(), values)?;
    Ok(CsvTable {
        feature_names,
        features,
        labels,
    })
}

/// Column means and population standard deviations of `x`. Constant columns
/// report a deviation of 1 so they standardize to zero.
pub fn column_stats(x: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn standardize(x: &mut DenseMatrix, mean: &[f64], std: &[f64]) {
    for i in 0..x.rows() {
        for ((v, m), s) in x.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

/// Loads, splits with the run seed and standardizes with train statistics.
pub fn load_csv_dataset(path: &Path, label_column: &str, test_fraction: f64, seed: u64) -> Result<(Batch, Batch, usize)> {
    let table = read_csv_table(path, label_column)?;
    if table.labels.len() < 2 {
        return Err(HarnessError::Data {
            path: path.to_path_buf(),
            line: 2,
            msg: "need at least two rows to split".into(),
        });
    }
    let num_classes = table.labels.iter().max().map_or(0, |m| m + 1).max(2);
    let all = Batch::new(table.features, Targets::Classes(table.labels))?;
    let (mut train, mut test) = split(&all, test_fraction, seed);
    let (mean, std) = column_stats(&train.x);
    standardize(&mut train.x, &mean, &std);
    standardize(&mut test.x, &mean, &std);
    Ok((train, test, num_classes))
}

/// Builds the dataset a config asks for.
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.task {
        Task::CsvClassify => {
            let path = cfg.data.csv_path.as_deref().expect("validated");
            let label = cfg.data.label_column.as_deref().unwrap_or("label");
            let (train, test, classes) = load_csv_dataset(path, label, cfg.data.test_fraction, cfg.seed)?;
            let dims = cfg.layer_dims(train.x.cols(), classes);
            let min_dim = dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
            if cfg.model.rank > min_dim {
                return Err(HarnessError::Usage(format!(
                    "model.rank {} exceeds the smallest layer side {min_dim} of the CSV model",
                    cfg.model.rank
                )));
            }
            Ok(Dataset {
                train,
                test,
                teacher: None,
                base: base_weights(&dims, cfg.data.base_gain, cfg.seed),
                num_classes: Some(classes),
            })
        }
        _ => make_synthetic_dataset(&SyntheticSpec::from_config(cfg)?, cfg.seed),
    }
}
