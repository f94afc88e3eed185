//! LoRA-adapted linear layers and a small feedforward classifier.
//!
//! A layer maps `x ∈ R^{1×n}` to `x·W + b` with `W = W0 + scale·UᵀV`,
//! `U ∈ R^{r×n}`, `V ∈ R^{r×k}`. Under this convention the partial gradients
//! for a weight gradient `G = ∂f/∂W` are `∇_U = scale·V·Gᵀ ∈ R^{r×n}` and
//! `∇_V = scale·U·G ∈ R^{r×k}`.
//!
//! `W0` has no mutable accessor; only `U`, `V` and the bias can change after
//! construction.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SeededRng};

/// Standard deviation of the Gaussian initialization of `V`.
pub const DEFAULT_V_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    w0: DenseMatrix,
    u: DenseMatrix,
    v: DenseMatrix,
    scale: f64,
}

impl LoraLinear {
    pub fn new(w0: DenseMatrix, u: DenseMatrix, v: DenseMatrix, scale: f64) -> Result<Self> {
        let (n, k) = w0.shape();
        let r = u.rows();
        if u.cols() != n || v.cols() != k || v.rows() != r {
            return Err(Error::invalid(format!(
                "LoRA factor shapes U {:?}, V {:?} incompatible with W0 {:?}",
                u.shape(),
                v.shape(),
                w0.shape()
            )));
        }
        if r > n.min(k) {
            return Err(Error::invalid(format!("rank {r} exceeds min({n}, {k})")));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("LoraLinear::new scale"));
        }
        Ok(Self { w0, u, v, scale })
    }

    /// Standard LoRA initialization: `U = 0`, `V ~ N(0, v_std²)`.
    pub fn init(w0: DenseMatrix, rank: usize, scale: f64, v_std: f64, rng: &mut SeededRng) -> Result<Self> {
        let (n, k) = w0.shape();
        let u = DenseMatrix::zeros(rank, n);
        let v = rng.gaussian_matrix(rank, k, 0.0, v_std);
        Self::new(w0, u, v, scale)
    }

    pub fn rank(&self) -> usize {
        self.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut DenseMatrix {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut DenseMatrix {
        &mut self.v
    }

    /// `scale·UᵀV`.
    pub fn delta(&self) -> Result<DenseMatrix> {
        Ok(self.u.t_matmul(&self.v)?.scaled(self.scale))
    }

    /// Effective weight `W0 + scale·UᵀV`.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let mut w = self.w0.clone();
        w.axpy(1.0, &self.delta()?)?;
        Ok(w)
    }

    /// Chain rule from a weight gradient to the factor gradients.
    pub fn lora_grads(&self, grad_w: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        if grad_w.shape() != self.w0.shape() {
            return Err(Error::Dimension {
                op: "lora_grads",
                lhs: self.w0.shape(),
                rhs: grad_w.shape(),
            });
        }
        let grad_u = self.v.matmul_t(grad_w)?.scaled(self.scale);
        let grad_v = self.u.matmul(grad_w)?.scaled(self.scale);
        Ok((grad_u, grad_v))
    }
}

/// Free-function form of [`LoraLinear::materialize`].
pub fn lora_materialize(layer: &LoraLinear) -> Result<DenseMatrix> {
    layer.materialize()
}

/// Hidden-layer nonlinearity. `Tanh` keeps the loss gradient Lipschitz;
/// `Relu` does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class labels for softmax cross-entropy.
    Classes(Vec<usize>),
    /// Regression targets for the squared loss.
    Values(DenseMatrix),
}

/// Inputs (one sample per row) and matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: DenseMatrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(x: DenseMatrix, targets: Targets) -> Result<Self> {
        let n = match &targets {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.rows(),
        };
        if n != x.rows() {
            return Err(Error::invalid(format!(
                "{} inputs but {n} targets",
                x.rows()
            )));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Sub-batch of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let cols = self.x.cols();
        let x = DenseMatrix::from_fn(rows.len(), cols, |i, j| self.x[(rows[i], j)]);
        let targets = match &self.targets {
            Targets::Classes(y) => Targets::Classes(rows.iter().map(|&i| y[i]).collect()),
            Targets::Values(y) => {
                Targets::Values(DenseMatrix::from_fn(rows.len(), y.cols(), |i, j| y[(rows[i], j)]))
            }
        };
        Batch { x, targets }
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/batch`.
pub fn nll_loss_and_grad(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::invalid(format!("{b} logit rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, c)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = DenseMatrix::zeros(b, c);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - log_z).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// `(1/(2·batch)) Σ ‖pred − target‖²` and its gradient.
pub fn squared_loss_and_grad(pred: &DenseMatrix, targets: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let diff = pred.sub(targets)?;
    let b = pred.rows();
    if b == 0 {
        return Ok((0.0, diff));
    }
    let inv_b = 1.0 / b as f64;
    let loss = 0.5 * diff.frobenius_norm_sq() * inv_b;
    Ok((loss, diff.scaled(inv_b)))
}

pub fn loss_and_grad(out: &DenseMatrix, targets: &Targets) -> Result<(f64, DenseMatrix)> {
    match targets {
        Targets::Classes(y) => nll_loss_and_grad(out, y),
        Targets::Values(y) => squared_loss_and_grad(out, y),
    }
}

/// Addresses one trainable tensor of an [`MlpModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    U(usize),
    V(usize),
    Bias(usize),
}

impl ParamId {
    pub fn is_vector(self) -> bool {
        matches!(self, ParamId::Bias(_))
    }

    pub fn name(self) -> String {
        match self {
            ParamId::U(l) => format!("layer{l}.u"),
            ParamId::V(l) => format!("layer{l}.v"),
            ParamId::Bias(l) => format!("layer{l}.bias"),
        }
    }
}

/// Gradients of every trainable tensor, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        match id {
            ParamId::U(l) => &self.layers[l].u,
            ParamId::V(l) => &self.layers[l].v,
            ParamId::Bias(l) => &self.layers[l].bias,
        }
    }

    /// Squared Frobenius norm summed over the given tensors.
    pub fn norm_sq(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|&id| self.get(id).frobenius_norm_sq()).sum()
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.u.axpy(alpha, &b.u)?;
            a.v.axpy(alpha, &b.v)?;
            a.bias.axpy(alpha, &b.bias)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for g in &mut self.layers {
            g.u.scale_in_place(alpha);
            g.v.scale_in_place(alpha);
            g.bias.scale_in_place(alpha);
        }
    }
}

/// Intermediate values retained by the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation of each layer.
    pre: Vec<DenseMatrix>,
    /// Effective weights used in the pass.
    weights: Vec<DenseMatrix>,
}

/// Feedforward network of LoRA layers; the activation is applied between
/// layers, never after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<LoraLinear>,
    biases: Vec<DenseMatrix>,
    activation: Activation,
}

impl MlpModel {
    pub fn new(layers: Vec<LoraLinear>, biases: Vec<DenseMatrix>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if biases.len() != layers.len() {
            return Err(Error::invalid(format!(
                "{} layers but {} bias vectors",
                layers.len(),
                biases.len()
            )));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {l} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (l, (layer, b)) in layers.iter().zip(&biases).enumerate() {
            if b.shape() != (1, layer.out_dim()) {
                return Err(Error::invalid(format!(
                    "bias {l} has shape {:?}, expected (1, {})",
                    b.shape(),
                    layer.out_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            biases,
            activation,
        })
    }

    /// Same architecture with zero biases.
    pub fn without_bias(layers: Vec<LoraLinear>, activation: Activation) -> Result<Self> {
        let biases = layers
            .iter()
            .map(|l| DenseMatrix::zeros(1, l.out_dim()))
            .collect();
        Self::new(layers, biases, activation)
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLinear] {
        &mut self.layers
    }

    pub fn biases(&self) -> &[DenseMatrix] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Trainable tensors in a fixed order: `U, V` per layer, then biases.
    pub fn param_ids(&self, include_bias: bool) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in 0..self.layers.len() {
            ids.push(ParamId::U(l));
            ids.push(ParamId::V(l));
        }
        if include_bias {
            ids.extend((0..self.layers.len()).map(ParamId::Bias));
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> &DenseMatrix {
        match id {
            ParamId::U(l) => self.layers[l].u(),
            ParamId::V(l) => self.layers[l].v(),
            ParamId::Bias(l) => &self.biases[l],
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        match id {
            ParamId::U(l) => self.layers[l].u_mut(),
            ParamId::V(l) => self.layers[l].v_mut(),
            ParamId::Bias(l) => &mut self.biases[l],
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                op: "forward",
                lhs: x.shape(),
                rhs: self.layers[0].base().shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (l, (layer, bias)) in self.layers.iter().zip(&self.biases).enumerate() {
            let w = layer.materialize()?;
            let mut z = a.matmul(&w)?;
            for i in 0..z.rows() {
                for (zj, bj) in z.row_mut(i).iter_mut().zip(bias.as_slice()) {
                    *zj += bj;
                }
            }
            let next = if l == last {
                z.clone()
            } else {
                let act = self.activation;
                DenseMatrix::from_fn(z.rows(), z.cols(), |i, j| act.apply(z[(i, j)]))
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
            weights.push(w);
        }
        Ok((a, ForwardCache { inputs, pre, weights }))
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.0)
    }

    /// Per-layer output gradients `∂f/∂z_l`, last layer first in the loop but
    /// returned in layer order.
    fn backprop_deltas(&self, cache: &ForwardCache, grad_out: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let n_layers = self.layers.len();
        let mut deltas = vec![DenseMatrix::zeros(0, 0); n_layers];
        let mut dz = grad_out.clone();
        for l in (0..n_layers).rev() {
            if l > 0 {
                let da = dz.matmul_t(&cache.weights[l])?;
                let z_prev = &cache.pre[l - 1];
                let a_prev = &cache.inputs[l];
                let act = self.activation;
                let next = DenseMatrix::from_fn(da.rows(), da.cols(), |i, j| {
                    da[(i, j)] * act.derivative(z_prev[(i, j)], a_prev[(i, j)])
                });
                deltas[l] = std::mem::replace(&mut dz, next);
            } else {
                deltas[l] = std::mem::replace(&mut dz, DenseMatrix::zeros(0, 0));
            }
        }
        Ok(deltas)
    }

    /// Exact gradients given `∂f/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DenseMatrix) -> Result<Gradients> {
        let deltas = self.backprop_deltas(cache, grad_out)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, dz) in deltas.iter().enumerate() {
            let grad_w = cache.inputs[l].t_matmul(dz)?;
            let (u, v) = self.layers[l].lora_grads(&grad_w)?;
            let mut bias = DenseMatrix::zeros(1, dz.cols());
            for i in 0..dz.rows() {
                for (b, d) in bias.as_mut_slice().iter_mut().zip(dz.row(i)) {
                    *b += d;
                }
            }
            layers.push(LayerGrads { u, v, bias });
        }
        Ok(Gradients { layers })
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let out = self.predict(&batch.x)?;
        Ok(loss_and_grad(&out, &batch.targets)?.0)
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward(&batch.x)?;
        let (loss, g_out) = loss_and_grad(&out, &batch.targets)?;
        let grads = self.backward(&cache, &g_out)?;
        Ok((loss, grads))
    }

    /// Norm of each single-sample gradient over the trainable tensors.
    ///
    /// A single sample's weight gradient is the rank-one `a_iᵀ dz_i`, so the
    /// factor-gradient norms reduce to `scale·‖V dz_iᵀ‖·‖a_i‖` and
    /// `scale·‖U a_iᵀ‖·‖dz_i‖` without forming per-sample matrices.
    pub fn per_sample_grad_norms(&self, batch: &Batch, include_bias: bool) -> Result<Vec<f64>> {
        let (out, cache) = self.forward(&batch.x)?;
        let (_, g_out) = loss_and_grad(&out, &batch.targets)?;
        // undo the 1/batch of the mean loss
        let g_out = g_out.scaled(batch.len() as f64);
        let deltas = self.backprop_deltas(&cache, &g_out)?;
        let mut sq = vec![0.0; batch.len()];
        for (l, dz) in deltas.iter().enumerate() {
            let layer = &self.layers[l];
            let a = &cache.inputs[l];
            let v_dz = dz.matmul_t(layer.v())?; // B × r, row i = (V dz_iᵀ)ᵀ
            let u_a = a.matmul_t(layer.u())?; // B × r
            let s2 = layer.scale() * layer.scale();
            for (i, acc) in sq.iter_mut().enumerate() {
                let a_sq: f64 = a.row(i).iter().map(|x| x * x).sum();
                let dz_sq: f64 = dz.row(i).iter().map(|x| x * x).sum();
                let vdz_sq: f64 = v_dz.row(i).iter().map(|x| x * x).sum();
                let ua_sq: f64 = u_a.row(i).iter().map(|x| x * x).sum();
                *acc += s2 * (vdz_sq * a_sq + ua_sq * dz_sq);
                if include_bias {
                    *acc += dz_sq;
                }
            }
        }
        Ok(sq.into_iter().map(f64::sqrt).collect())
    }
}

/// Max over checked parameter entries of
/// `|analytic − central difference| / max(1, |analytic|)`.
///
/// Every entry of `U`, `V` and the biases is checked when a tensor has at
/// most 64 entries; larger tensors are subsampled with a fixed seed.
/// `epsilon` should lie in `[1e-8, 1e-4]`; larger steps are accepted so the
/// truncation error can be studied.
pub fn finite_diff_check(model: &MlpModel, batch: &Batch, epsilon: f64) -> Result<f64> {
    finite_diff_check_sampled(model, batch, epsilon, 64)
}

pub fn finite_diff_check_sampled(
    model: &MlpModel,
    batch: &Batch,
    epsilon: f64,
    max_entries_per_param: usize,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let (_, grads) = model.loss_and_grad(batch)?;
    let mut probe = model.clone();
    let mut rng = SeededRng::new(0);
    let mut worst: f64 = 0.0;
    for id in model.param_ids(true) {
        let len = model.param(id).as_slice().len();
        let entries: Vec<usize> = if len <= max_entries_per_param {
            (0..len).collect()
        } else {
            (0..max_entries_per_param).map(|_| rng.below(len)).collect()
        };
        for idx in entries {
            let orig = model.param(id).as_slice()[idx];
            probe.param_mut(id).as_mut_slice()[idx] = orig + epsilon;
            let plus = probe.loss(batch)?;
            probe.param_mut(id).as_mut_slice()[idx] = orig - epsilon;
            let minus = probe.loss(batch)?;
            probe.param_mut(id).as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(id).as_slice()[idx];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    Ok(worst)
}
