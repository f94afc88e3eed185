//! Training loop, metrics CSV and convergence diagnostics.
//!
//! Each logged record evaluates the full training set at the current
//! parameters. `dyn_grad_norm_sq` is `‖∇f + λ·v·θ‖²`, where the regularizer
//! `(λ/2)·‖θ‖²_v` runs over AdaFish-managed parameters only and `v = γĥ + δI`
//! comes from the optimizer state that produced the current parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adafish::checkpoint::Checkpoint;
use adafish::linalg::{format_f64, SeededRng};
use adafish::lora::{Batch, Gradients, MlpModel, ParamId, Targets};
use adafish::optim::{orient_and_dispatch, Hyperparams, ParamKind, ParamState, Route};
use adafish::DenseMatrix;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{dataset_for, make_student, Dataset, STREAM_SHUFFLE};
use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: &str =
    "epoch,step,train_loss,test_accuracy,grad_norm_sq,dyn_grad_norm_sq,step_vnorm_sq,lr,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    /// Argmax match rate for classification, R² for regression.
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub dyn_grad_norm_sq: f64,
    /// `‖θ_{t−1} − θ_t‖²_{v}` of the update that produced this record; 0 at step 0.
    pub step_vnorm_sq: f64,
    /// Learning rate of the next step.
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            format_f64(self.train_loss),
            format_f64(self.test_accuracy),
            format_f64(self.grad_norm_sq),
            format_f64(self.dyn_grad_norm_sq),
            format_f64(self.step_vnorm_sq),
            format_f64(self.lr),
            format_f64(self.wall_ms),
        )
    }
}

/// Parses a metrics CSV written by [`MetricsWriter`].
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_metrics_text(&text, path)
}

pub fn parse_metrics_text(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |line: usize, msg: String| HarnessError::Data {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("unexpected header {h:?}"))),
        None => return Err(err(1, "missing header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 9 {
            return Err(err(line_no, format!("expected 9 fields, found {}", cells.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| err(line_no, format!("bad integer {s:?}")));
        let real = |s: &str| s.parse::<f64>().map_err(|_| err(line_no, format!("bad number {s:?}")));
        out.push(MetricsRecord {
            epoch: int(cells[0])? as usize,
            step: int(cells[1])?,
            train_loss: real(cells[2])?,
            test_accuracy: real(cells[3])?,
            grad_norm_sq: real(cells[4])?,
            dyn_grad_norm_sq: real(cells[5])?,
            step_vnorm_sq: real(cells[6])?,
            lr: real(cells[7])?,
            wall_ms: real(cells[8])?,
        });
    }
    Ok(out)
}

/// Buffered CSV sink, flushed at epoch boundaries.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_line(METRICS_HEADER)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.write_line(&rec.to_csv_line())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceDiagnostics {
    /// Mean of every logged `dyn_grad_norm_sq`, step 0 included.
    pub running_avg_dyn_grad_norm_sq: f64,
    /// Mean of logged `step_vnorm_sq` over records after step 0.
    pub running_avg_step_vnorm_sq: f64,
    /// Largest per-sample gradient norm seen at any logged evaluation.
    pub dg_estimate: f64,
    /// Mean squared deviation of the final mini-batch gradients from their mean.
    pub grad_variance_estimate: f64,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub final_grad_norm_sq: f64,
    pub final_dyn_grad_norm_sq: f64,
    pub steps: u64,
    pub records: usize,
    pub frozen_base_ok: bool,
    pub status: RunStatus,
}

impl ConvergenceDiagnostics {
    pub fn from_records(records: &[MetricsRecord]) -> (f64, f64) {
        let dyn_avg = mean(records.iter().map(|r| r.dyn_grad_norm_sq));
        let v_avg = mean(records.iter().filter(|r| r.step > 0).map(|r| r.step_vnorm_sq));
        (dyn_avg, v_avg)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Running mean of `dyn_grad_norm_sq` after each record.
pub fn running_dyn_average(records: &[MetricsRecord]) -> Vec<f64> {
    let mut s = 0.0;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            s += r.dyn_grad_norm_sq;
            s / (i + 1) as f64
        })
        .collect()
}

/// Everything a run produces, in memory.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub diagnostics: ConvergenceDiagnostics,
    pub model: MlpModel,
    pub optimizer: Vec<(ParamId, ParamState)>,
    pub hyperparams: Hyperparams,
    pub status: RunStatus,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.iter().map(|(id, s)| (id.name(), s.clone())).collect(),
        }
    }
}

/// Paths written by [`train`] for a given prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub diagnostics: PathBuf,
}

impl OutputPaths {
    pub fn for_prefix(prefix: &Path) -> Self {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_os_string();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            metrics: with(".metrics.csv"),
            checkpoint: with(".ckpt"),
            diagnostics: with(".diagnostics.json"),
        }
    }
}

/// Runs a config and writes `{prefix}.metrics.csv`, `{prefix}.ckpt` and
/// `{prefix}.diagnostics.json`. A diverged run still writes all three.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let paths = OutputPaths::for_prefix(&cfg.output_prefix);
    if let Some(dir) = paths.metrics.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
    }
    let data = dataset_for(cfg)?;
    let mut writer = MetricsWriter::create(&paths.metrics)?;
    let outcome = run(cfg, &data, Some(&mut writer))?;
    writer.flush()?;
    outcome
        .checkpoint()
        .save(&paths.checkpoint)?;
    let json = serde_json::to_string_pretty(&outcome.diagnostics).expect("diagnostics serialize");
    std::fs::write(&paths.diagnostics, json + "\n").map_err(|e| HarnessError::io(&paths.diagnostics, e))?;
    Ok(outcome)
}

/// Runs a config on a prepared dataset without touching the filesystem
/// beyond the optional CSV sink.
pub fn run(cfg: &ExperimentConfig, data: &Dataset, mut sink: Option<&mut MetricsWriter>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let wall = |enabled: bool| if enabled { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

    let mut model = make_student(&data.base, cfg)?;
    if model.out_dim() != data.train_outputs() || model.in_dim() != data.input_dim() {
        return Err(HarnessError::Usage(format!(
            "model maps {} -> {} but the data has {} inputs and {} outputs",
            model.in_dim(),
            model.out_dim(),
            data.input_dim(),
            data.train_outputs()
        )));
    }
    let n_train = data.train.len();
    let steps_per_epoch = if cfg.full_batch { 1 } else { n_train.div_ceil(cfg.batch_size) };
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let hp = cfg.resolved_hyperparams(total_steps).map_err(HarnessError::Usage)?;
    let policy = cfg.policy();

    let ids = model.param_ids(cfg.train_biases);
    let mut states: Vec<(ParamId, ParamState)> = ids
        .iter()
        .map(|&id| {
            let (r, c) = model.param(id).shape();
            let kind = if id.is_vector() { ParamKind::Vector } else { ParamKind::Matrix };
            (id, ParamState::new(policy.route(kind, r, c), r, c))
        })
        .collect();

    let mut records = Vec::new();
    let mut dg_estimate = 0.0f64;
    let mut status = RunStatus::Completed;
    let mut step: u64 = 0;

    let first = evaluate(&model, data, &states, &hp, cfg.train_biases)?;
    dg_estimate = dg_estimate.max(first.dg);
    let rec = first.record(0, 0, 0.0, hp.lr(0), wall(cfg.wall_clock));
    emit(&mut sink, &mut records, rec, true)?;
    if !rec.train_loss.is_finite() {
        status = RunStatus::Diverged {
            step: 0,
            reason: "non-finite initial loss".into(),
        };
    }

    'epochs: for epoch in 1..=cfg.epochs {
        if status.is_diverged() {
            break;
        }
        let mut order: Vec<usize> = (0..n_train).collect();
        if !cfg.full_batch {
            SeededRng::with_stream(cfg.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
        }
        let batch_size = if cfg.full_batch { n_train } else { cfg.batch_size };
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let eta = hp.lr(step);
            let stepped = if cfg.full_batch {
                apply_step(&mut model, &data.train, &ids, &mut states, &hp, eta)
            } else {
                apply_step(&mut model, &data.train.select(chunk), &ids, &mut states, &hp, eta)
            };
            step += 1;
            let vnorm = match stepped {
                Ok(v) => v,
                Err(reason) => {
                    status = RunStatus::Diverged { step, reason };
                    log::warn!("run diverged at step {step}");
                    if let Some(w) = sink.as_deref_mut() {
                        w.flush()?;
                    }
                    break 'epochs;
                }
            };
            let last_in_epoch = b + 1 == steps_per_epoch;
            if cfg.log_every_step || last_in_epoch {
                let ev = match evaluate(&model, data, &states, &hp, cfg.train_biases) {
                    Ok(ev) => ev,
                    Err(HarnessError::Core(e)) => {
                        status = RunStatus::Diverged {
                            step,
                            reason: e.to_string(),
                        };
                        log::warn!("run diverged at step {step}");
                        if let Some(w) = sink.as_deref_mut() {
                            w.flush()?;
                        }
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                dg_estimate = dg_estimate.max(ev.dg);
                let rec = ev.record(epoch, step, vnorm, hp.lr(step), wall(cfg.wall_clock));
                emit(&mut sink, &mut records, rec, last_in_epoch)?;
                if !rec.train_loss.is_finite() || !rec.dyn_grad_norm_sq.is_finite() {
                    status = RunStatus::Diverged {
                        step,
                        reason: "non-finite training loss".into(),
                    };
                    break 'epochs;
                }
            }
        }
    }

    let grad_variance_estimate = minibatch_variance(&model, data, cfg).unwrap_or(f64::NAN);
    let frozen_base_ok = model
        .layers()
        .iter()
        .zip(&data.base)
        .all(|(l, w0)| l.base().as_slice().iter().zip(w0.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let (running_avg_dyn_grad_norm_sq, running_avg_step_vnorm_sq) = ConvergenceDiagnostics::from_records(&records);
    let last = *records.last().expect("step-0 record");
    let diagnostics = ConvergenceDiagnostics {
        running_avg_dyn_grad_norm_sq,
        running_avg_step_vnorm_sq,
        dg_estimate,
        grad_variance_estimate,
        final_train_loss: last.train_loss,
        final_test_accuracy: last.test_accuracy,
        final_grad_norm_sq: last.grad_norm_sq,
        final_dyn_grad_norm_sq: last.dyn_grad_norm_sq,
        steps: step,
        records: records.len(),
        frozen_base_ok,
        status: status.clone(),
    };
    Ok(TrainOutcome {
        records,
        diagnostics,
        model,
        optimizer: states,
        hyperparams: hp,
        status,
    })
}

fn emit(
    sink: &mut Option<&mut MetricsWriter>,
    records: &mut Vec<MetricsRecord>,
    rec: MetricsRecord,
    flush: bool,
) -> Result<()> {
    if let Some(w) = sink.as_deref_mut() {
        w.write(&rec)?;
        if flush {
            w.flush()?;
        }
    }
    records.push(rec);
    Ok(())
}

/// One optimizer step on a mini-batch. Returns the summed step v-norm, or a
/// divergence reason.
fn apply_step(
    model: &mut MlpModel,
    batch: &Batch,
    ids: &[ParamId],
    states: &mut [(ParamId, ParamState)],
    hp: &Hyperparams,
    eta: f64,
) -> std::result::Result<f64, String> {
    let (loss, grads) = model.loss_and_grad(batch).map_err(|e| e.to_string())?;
    if !loss.is_finite() {
        return Err("non-finite mini-batch loss".into());
    }
    let mut vnorm = 0.0;
    for (&id, (_, slot)) in ids.iter().zip(states.iter_mut()) {
        let info = orient_and_dispatch(model.param_mut(id), grads.get(id), slot, hp, eta).map_err(|e| e.to_string())?;
        if !model.param(id).is_finite() {
            return Err(format!("non-finite {}", id.name()));
        }
        vnorm += info.vnorm_sq;
    }
    Ok(vnorm)
}

struct Evaluation {
    loss: f64,
    accuracy: f64,
    grad_norm_sq: f64,
    dyn_grad_norm_sq: f64,
    dg: f64,
}

impl Evaluation {
    fn record(&self, epoch: usize, step: u64, vnorm: f64, lr: f64, wall_ms: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            step,
            train_loss: self.loss,
            test_accuracy: self.accuracy,
            grad_norm_sq: self.grad_norm_sq,
            dyn_grad_norm_sq: self.dyn_grad_norm_sq,
            step_vnorm_sq: vnorm,
            lr,
            wall_ms,
        }
    }
}

fn evaluate(
    model: &MlpModel,
    data: &Dataset,
    states: &[(ParamId, ParamState)],
    hp: &Hyperparams,
    include_bias: bool,
) -> Result<Evaluation> {
    let (loss, grads) = model.loss_and_grad(&data.train)?;
    let grad_norm_sq = trainable_norm_sq(&grads, states);
    let dyn_grad_norm_sq = dynamic_grad_norm_sq(model, &grads, states, hp)?;
    let dg = model
        .per_sample_grad_norms(&data.train, include_bias)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Evaluation {
        loss,
        accuracy: test_score(model, &data.test)?,
        grad_norm_sq,
        dyn_grad_norm_sq,
        dg,
    })
}

fn trainable_norm_sq(grads: &Gradients, states: &[(ParamId, ParamState)]) -> f64 {
    states.iter().map(|(id, _)| grads.get(*id).frobenius_norm_sq()).sum()
}

/// `‖∇f + λ·v·θ‖²` with the regularizer on AdaFish-managed parameters.
pub fn dynamic_grad_norm_sq(
    model: &MlpModel,
    grads: &Gradients,
    states: &[(ParamId, ParamState)],
    hp: &Hyperparams,
) -> Result<f64> {
    let mut total = 0.0;
    for (id, state) in states {
        let g = grads.get(*id);
        if matches!(state.route(), Route::AdaFish(_)) {
            let mut d = g.clone();
            d.axpy(hp.lambda, &state.metric_apply(model.param(*id), hp)?)?;
            total += d.frobenius_norm_sq();
        } else {
            total += g.frobenius_norm_sq();
        }
    }
    Ok(total)
}

/// Argmax accuracy for class targets; coefficient of determination for values.
pub fn test_score(model: &MlpModel, test: &Batch) -> Result<f64> {
    if test.is_empty() {
        return Ok(f64::NAN);
    }
    let out = model.predict(&test.x)?;
    Ok(match &test.targets {
        Targets::Classes(y) => {
            let hits = (0..out.rows()).filter(|&i| argmax(out.row(i)) == y[i]).count();
            hits as f64 / y.len() as f64
        }
        Targets::Values(y) => r_squared(&out, y),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn r_squared(pred: &DenseMatrix, y: &DenseMatrix) -> f64 {
    let n = y.rows() as f64;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for j in 0..y.cols() {
        let mu = (0..y.rows()).map(|i| y[(i, j)]).sum::<f64>() / n;
        for i in 0..y.rows() {
            sse += (pred[(i, j)] - y[(i, j)]).powi(2);
            sst += (y[(i, j)] - mu).powi(2);
        }
    }
    if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Mean `‖g_b − ḡ‖²` over the mini-batches of one fixed epoch ordering,
/// taken at the final parameters.
fn minibatch_variance(model: &MlpModel, data: &Dataset, cfg: &ExperimentConfig) -> Result<f64> {
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::with_stream(cfg.seed, STREAM_SHUFFLE).shuffle(&mut order);
    let ids = model.param_ids(cfg.train_biases);
    let grads: Vec<Gradients> = order
        .chunks(cfg.batch_size.min(n))
        .map(|c| model.loss_and_grad(&data.train.select(c)).map(|(_, g)| g))
        .collect::<adafish::Result<_>>()?;
    let mut avg = grads[0].clone();
    for g in &grads[1..] {
        avg.axpy(1.0, g)?;
    }
    avg.scale_in_place(1.0 / grads.len() as f64);
    let mut total = 0.0;
    for g in &grads {
        let mut d = g.clone();
        d.axpy(-1.0, &avg)?;
        total += d.norm_sq(&ids);
    }
    Ok(total / grads.len() as f64)
}

impl Dataset {
    /// Width of the model output the targets call for.
    pub fn train_outputs(&self) -> usize {
        match (&self.train.targets, self.num_classes) {
            (Targets::Values(y), _) => y.cols(),
            (Targets::Classes(_), Some(c)) => c,
            (Targets::Classes(y), None) => y.iter().max().map_or(0, |m| m + 1),
        }
    }
}
