//! AdaFish and first-order baselines.
//!
//! AdaFish keeps an exponential moving average of the row Gram `g·gᵀ` of each
//! matrix gradient (an `r × r` matrix when `g` is `r × n`) and preconditions the
//! bias-corrected momentum with `(γ·ĥ + δ·I)⁻¹` applied from the left:
//!
//! ```text
//! t ← t + 1
//! m ← β1·m + (1−β1)·g          m̂ = m / (1 − β1ᵗ)
//! h ← β2·h + (1−β2)·g·gᵀ       ĥ = h / (1 − β2ᵗ)
//! θ ← θ − η·λ·θ
//! θ ← θ − η·(γ·ĥ + δ·I)⁻¹·m̂
//! ```
//!
//! The state stores `m̂` and `ĥ` directly, updated as
//! `m̂ ← m̂ + (1−β1)/(1−β1ᵗ)·(g − m̂)`. This is algebraically the same
//! recursion, and at `t = 1` the coefficient is exactly one so `m̂ = g` and
//! `ĥ = g·gᵀ` hold bitwise. The raw moments are available through
//! [`AdaFishState::m`] and [`AdaFishState::h`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{spd_solve, DenseMatrix};

/// AdamW denominator offset.
pub const ADAMW_EPS: f64 = 1e-8;

/// Gram matrices larger than this fall back to AdamW.
pub const DEFAULT_MAX_GRAM_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::invalid(format!("unknown schedule {other:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub eta0: f64,
    pub eta_min: f64,
    pub total_steps: u64,
    /// Decoupled weight decay.
    pub lambda: f64,
    /// Scale on the Gram second moment.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Diagonal damping of the preconditioner.
    pub delta: f64,
    pub schedule: Schedule,
}

impl Hyperparams {
    /// η₀ = 0.1, λ = 0.1, γ = 2e-4, β = (0.8, 0.99), δ = 1e-15, cosine to 0.
    pub fn adafish_default(total_steps: u64) -> Self {
        Self {
            eta0: 1e-1,
            eta_min: 0.0,
            total_steps,
            lambda: 1e-1,
            gamma: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            delta: 1e-15,
            schedule: Schedule::Cosine,
        }
    }

    /// η₀ = 0.1, λ = 1e-4, β = (0.9, 0.999), cosine to 0. `gamma` and
    /// `delta` are unused by AdamW.
    pub fn adamw_default(total_steps: u64) -> Self {
        Self {
            eta0: 1e-1,
            eta_min: 0.0,
            total_steps,
            lambda: 1e-4,
            gamma: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            delta: 1e-15,
            schedule: Schedule::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return Err(Error::invalid(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if self.eta_min.is_nan() || self.eta_min < 0.0 || self.eta_min > self.eta0 {
            return Err(Error::invalid(format!(
                "eta_min must lie in [0, eta0], got {}",
                self.eta_min
            )));
        }
        Ok(())
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta0,
            Schedule::Cosine => cosine_lr(step, self.total_steps, self.eta0, self.eta_min),
        }
    }
}

/// `eta_min + ½(eta0 − eta_min)(1 + cos(π·step/total))`, clamped to
/// `eta_min` past the end. A zero-length schedule stays at `eta0`.
pub fn cosine_lr(step: u64, total_steps: u64, eta0: f64, eta_min: f64) -> f64 {
    if total_steps == 0 {
        return eta0;
    }
    if step >= total_steps {
        return eta_min;
    }
    let progress = step as f64 / total_steps as f64;
    eta_min + 0.5 * (eta0 - eta_min) * (1.0 + (PI * progress).cos())
}

/// AdaFish moments for one `r × n` parameter (Gram side = rows).
#[derive(Clone, Debug, PartialEq)]
pub struct AdaFishState {
    m_hat: DenseMatrix,
    h_hat: DenseMatrix,
    t: u64,
}

impl AdaFishState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m_hat: DenseMatrix::zeros(rows, cols),
            h_hat: DenseMatrix::zeros(rows, rows),
            t: 0,
        }
    }

    /// Rebuilds a state from stored parts (checkpoint loading).
    pub fn from_parts(m_hat: DenseMatrix, h_hat: DenseMatrix, t: u64) -> Result<Self> {
        if h_hat.shape() != (m_hat.rows(), m_hat.rows()) {
            return Err(Error::invalid(format!(
                "Gram moment {:?} does not match first moment {:?}",
                h_hat.shape(),
                m_hat.shape()
            )));
        }
        Ok(Self { m_hat, h_hat, t })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Bias-corrected first moment `m̂`.
    pub fn m_hat(&self) -> &DenseMatrix {
        &self.m_hat
    }

    /// Bias-corrected Gram moment `ĥ`.
    pub fn h_hat(&self) -> &DenseMatrix {
        &self.h_hat
    }

    /// Raw first moment `m = (1 − β1ᵗ)·m̂`.
    pub fn m(&self, beta1: f64) -> DenseMatrix {
        self.m_hat.scaled(1.0 - beta1.powi(self.t as i32))
    }

    /// Raw Gram moment `h = (1 − β2ᵗ)·ĥ`.
    pub fn h(&self, beta2: f64) -> DenseMatrix {
        self.h_hat.scaled(1.0 - beta2.powi(self.t as i32))
    }

    /// Preconditioner metric `v = γ·ĥ + δ·I`.
    pub fn metric(&self, hp: &Hyperparams) -> DenseMatrix {
        let mut v = self.h_hat.scaled(hp.gamma);
        v.add_diagonal(hp.delta);
        v
    }

    /// `trace(Δᵀ·v·Δ)`.
    pub fn vnorm_sq(&self, delta: &DenseMatrix, hp: &Hyperparams) -> Result<f64> {
        let v_delta = self.metric(hp).matmul(delta)?;
        delta.frobenius_dot(&v_delta)
    }
}

pub fn adafish_step(
    theta: &mut DenseMatrix,
    g: &DenseMatrix,
    state: &mut AdaFishState,
    hp: &Hyperparams,
    eta_t: f64,
) -> Result<()> {
    if g.shape() != theta.shape() || g.shape() != state.m_hat.shape() {
        return Err(Error::Dimension {
            op: "adafish_step",
            lhs: theta.shape(),
            rhs: g.shape(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = (1.0 - hp.beta1) / (1.0 - hp.beta1.powi(t));
    let c2 = (1.0 - hp.beta2) / (1.0 - hp.beta2.powi(t));

    let dm = g.sub(&state.m_hat)?;
    state.m_hat.axpy(c1, &dm)?;
    let dh = g.gram_rows().sub(&state.h_hat)?;
    state.h_hat.axpy(c2, &dh)?;
    state.h_hat.symmetrize();

    theta.scale_in_place(1.0 - eta_t * hp.lambda);
    let direction = spd_solve(&state.h_hat.scaled(hp.gamma), &state.m_hat, hp.delta)?;
    theta.axpy(-eta_t, &direction)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub t: u64,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            t: 0,
        }
    }
}

pub fn adamw_step(
    theta: &mut DenseMatrix,
    g: &DenseMatrix,
    state: &mut AdamWState,
    hp: &Hyperparams,
    eta_t: f64,
) -> Result<()> {
    if g.shape() != theta.shape() || g.shape() != state.m.shape() {
        return Err(Error::Dimension {
            op: "adamw_step",
            lhs: theta.shape(),
            rhs: g.shape(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let th = theta.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (i, &gi) in g.as_slice().iter().enumerate() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        th[i] = th[i] - eta_t * hp.lambda * th[i] - eta_t * m_hat / (v_hat.sqrt() + ADAMW_EPS);
    }
    Ok(())
}

/// Heavy-ball momentum without bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub m: DenseMatrix,
    pub t: u64,
}

impl SgdState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DenseMatrix::zeros(rows, cols),
            t: 0,
        }
    }
}

pub fn sgd_momentum_step(
    theta: &mut DenseMatrix,
    g: &DenseMatrix,
    state: &mut SgdState,
    beta1: f64,
    eta_t: f64,
    lambda: f64,
) -> Result<()> {
    if g.shape() != theta.shape() || g.shape() != state.m.shape() {
        return Err(Error::Dimension {
            op: "sgd_momentum_step",
            lhs: theta.shape(),
            rhs: g.shape(),
        });
    }
    state.t += 1;
    let th = theta.as_mut_slice();
    let m = state.m.as_mut_slice();
    for (i, &gi) in g.as_slice().iter().enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        th[i] = th[i] - eta_t * lambda * th[i] - eta_t * m[i];
    }
    Ok(())
}

/// Bias-corrected momentum `θ ← (1 − ηλ)θ − η·m̂`, using the same moment
/// recursion and update arithmetic as [`adafish_step`]; AdaFish with `γ = 0`,
/// `δ = 1` reproduces it bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub m_hat: DenseMatrix,
    pub t: u64,
}

impl MomentumState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m_hat: DenseMatrix::zeros(rows, cols),
            t: 0,
        }
    }
}

pub fn momentum_step(
    theta: &mut DenseMatrix,
    g: &DenseMatrix,
    state: &mut MomentumState,
    beta1: f64,
    eta_t: f64,
    lambda: f64,
) -> Result<()> {
    if g.shape() != theta.shape() || g.shape() != state.m_hat.shape() {
        return Err(Error::Dimension {
            op: "momentum_step",
            lhs: theta.shape(),
            rhs: g.shape(),
        });
    }
    state.t += 1;
    let c1 = (1.0 - beta1) / (1.0 - beta1.powi(state.t as i32));
    let dm = g.sub(&state.m_hat)?;
    state.m_hat.axpy(c1, &dm)?;
    theta.scale_in_place(1.0 - eta_t * lambda);
    theta.axpy(-eta_t, &state.m_hat)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    AdaFish,
    AdamW,
    /// Momentum SGD without bias correction.
    Sgd,
    /// Bias-corrected momentum.
    Momentum,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adafish" => Ok(Self::AdaFish),
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdaFish => "adafish",
            Self::AdamW => "adamw",
            Self::Sgd => "sgd",
            Self::Momentum => "momentum",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Vector,
}

/// Which side of a matrix parameter carries the Gram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `g·gᵀ`, used when `rows <= cols` (ties go here).
    GramOnRows,
    /// `gᵀ·g`, handled by transposing in and out.
    GramOnCols,
}

impl Orientation {
    pub fn for_shape(rows: usize, cols: usize) -> Self {
        if rows <= cols {
            Orientation::GramOnRows
        } else {
            Orientation::GramOnCols
        }
    }

    fn apply(self, m: &DenseMatrix) -> DenseMatrix {
        match self {
            Orientation::GramOnRows => m.clone(),
            Orientation::GramOnCols => m.transpose(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    AdaFish(Orientation),
    AdamW,
    Sgd,
    Momentum,
}

/// Assigns each parameter an update rule. Under AdaFish, matrices whose
/// smaller side is at most `max_gram_dim` get the Gram preconditioner;
/// vectors, biases and larger matrices fall back to AdamW.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamPolicy {
    pub optimizer: OptimizerKind,
    pub max_gram_dim: usize,
}

impl ParamPolicy {
    pub fn new(optimizer: OptimizerKind) -> Self {
        Self {
            optimizer,
            max_gram_dim: DEFAULT_MAX_GRAM_DIM,
        }
    }

    pub fn route(&self, kind: ParamKind, rows: usize, cols: usize) -> Route {
        match self.optimizer {
            OptimizerKind::AdaFish => match kind {
                ParamKind::Matrix if rows.min(cols) <= self.max_gram_dim => {
                    Route::AdaFish(Orientation::for_shape(rows, cols))
                }
                _ => Route::AdamW,
            },
            OptimizerKind::AdamW => Route::AdamW,
            OptimizerKind::Sgd => Route::Sgd,
            OptimizerKind::Momentum => Route::Momentum,
        }
    }
}

/// Per-parameter optimizer state, created from a [`Route`].
#[derive(Clone, Debug, PartialEq)]
pub enum ParamState {
    AdaFish {
        orientation: Orientation,
        state: AdaFishState,
    },
    AdamW(AdamWState),
    Sgd(SgdState),
    Momentum(MomentumState),
}

impl ParamState {
    pub fn new(route: Route, rows: usize, cols: usize) -> Self {
        match route {
            Route::AdaFish(orientation) => {
                let (r, n) = match orientation {
                    Orientation::GramOnRows => (rows, cols),
                    Orientation::GramOnCols => (cols, rows),
                };
                ParamState::AdaFish {
                    orientation,
                    state: AdaFishState::new(r, n),
                }
            }
            Route::AdamW => ParamState::AdamW(AdamWState::new(rows, cols)),
            Route::Sgd => ParamState::Sgd(SgdState::new(rows, cols)),
            Route::Momentum => ParamState::Momentum(MomentumState::new(rows, cols)),
        }
    }

    pub fn route(&self) -> Route {
        match self {
            ParamState::AdaFish { orientation, .. } => Route::AdaFish(*orientation),
            ParamState::AdamW(_) => Route::AdamW,
            ParamState::Sgd(_) => Route::Sgd,
            ParamState::Momentum(_) => Route::Momentum,
        }
    }

    /// `v_t·θ` in the parameter's own shape; `v_t = γ·ĥ + δ·I` on the Gram
    /// side for AdaFish parameters and the identity otherwise.
    pub fn metric_apply(&self, theta: &DenseMatrix, hp: &Hyperparams) -> Result<DenseMatrix> {
        match self {
            ParamState::AdaFish { orientation, state } => {
                let vt = state.metric(hp).matmul(&orientation.apply(theta))?;
                Ok(orientation.apply(&vt))
            }
            _ => Ok(theta.clone()),
        }
    }

    /// `‖Δ‖²_{v_t}` under the same metric as [`metric_apply`](Self::metric_apply).
    pub fn vnorm_sq(&self, delta: &DenseMatrix, hp: &Hyperparams) -> Result<f64> {
        match self {
            ParamState::AdaFish { orientation, state } => state.vnorm_sq(&orientation.apply(delta), hp),
            _ => Ok(delta.frobenius_norm_sq()),
        }
    }
}

/// Outcome of one parameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// `‖θ_t − θ_{t+1}‖²_{v_t}`, with `v_t` taken after the moment update.
    pub vnorm_sq: f64,
}

/// Routes one gradient to its update rule.
///
/// Gram-on-columns parameters are transposed so the Gram is formed on the
/// smaller side, stepped, and transposed back.
pub fn orient_and_dispatch(
    theta: &mut DenseMatrix,
    grad: &DenseMatrix,
    slot: &mut ParamState,
    hp: &Hyperparams,
    eta_t: f64,
) -> Result<StepInfo> {
    let before = theta.clone();
    match slot {
        ParamState::AdaFish { orientation, state } => match orientation {
            Orientation::GramOnRows => adafish_step(theta, grad, state, hp, eta_t)?,
            Orientation::GramOnCols => {
                let mut t = theta.transpose();
                adafish_step(&mut t, &grad.transpose(), state, hp, eta_t)?;
                *theta = t.transpose();
            }
        },
        ParamState::AdamW(state) => adamw_step(theta, grad, state, hp, eta_t)?,
        ParamState::Sgd(state) => sgd_momentum_step(theta, grad, state, hp.beta1, eta_t, hp.lambda)?,
        ParamState::Momentum(state) => momentum_step(theta, grad, state, hp.beta1, eta_t, hp.lambda)?,
    }
    let delta = before.sub(theta)?;
    Ok(StepInfo {
        vnorm_sq: slot.vnorm_sq(&delta, hp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_gaussian, SeededRng};

    fn scalar(x: f64) -> DenseMatrix {
        DenseMatrix::row_vector(&[x])
    }

    #[test]
    fn zero_gradient_isolates_decay() {
        let mut hp = Hyperparams::adafish_default(10);
        hp.lambda = 0.1;
        let mut theta = scalar(1.0);
        let mut st = AdaFishState::new(1, 1);
        adafish_step(&mut theta, &scalar(0.0), &mut st, &hp, 0.1).unwrap();
        assert_eq!(theta[(0, 0)], 1.0 - 0.1 * 0.1);
        assert!((theta[(0, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn scalar_first_step() {
        let hp = Hyperparams {
            eta0: 0.1,
            eta_min: 0.0,
            total_steps: 1,
            lambda: 0.0,
            gamma: 1.0,
            beta1: 0.8,
            beta2: 0.99,
            delta: 1e-15,
            schedule: Schedule::Constant,
        };
        let mut theta = scalar(1.0);
        let mut st = AdaFishState::new(1, 1);
        adafish_step(&mut theta, &scalar(2.0), &mut st, &hp, 0.1).unwrap();
        assert!((st.m(hp.beta1)[(0, 0)] - 0.4).abs() < 1e-15);
        assert!((st.h(hp.beta2)[(0, 0)] - 0.04).abs() < 1e-15);
        assert_eq!(st.m_hat()[(0, 0)], 2.0);
        assert_eq!(st.h_hat()[(0, 0)], 4.0);
        assert!((theta[(0, 0)] - 0.95).abs() < 1e-14);
    }

    #[test]
    fn unit_preconditioner_is_bias_corrected_momentum() {
        let mut hp = Hyperparams::adafish_default(100);
        hp.gamma = 0.0;
        hp.delta = 1.0;
        hp.lambda = 0.0;
        let mut rng = SeededRng::new(4);
        let mut a = rng.gaussian_matrix(3, 5, 0.0, 1.0);
        let mut b = a.clone();
        let mut sa = AdaFishState::new(3, 5);
        let mut sb = MomentumState::new(3, 5);
        for _ in 0..50 {
            let g = rng.gaussian_matrix(3, 5, 0.0, 1.0);
            adafish_step(&mut a, &g, &mut sa, &hp, 0.05).unwrap();
            momentum_step(&mut b, &g, &mut sb, hp.beta1, 0.05, hp.lambda).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let hp = Hyperparams::adafish_default(1);
        let mut theta = DenseMatrix::zeros(2, 3);
        let mut st = AdaFishState::new(2, 3);
        assert!(adafish_step(&mut theta, &DenseMatrix::zeros(3, 2), &mut st, &hp, 0.1).is_err());
    }

    #[test]
    fn adamw_zero_gradient_decays() {
        let hp = Hyperparams::adamw_default(1);
        let mut theta = DenseMatrix::row_vector(&[2.0, -4.0]);
        let mut st = AdamWState::new(1, 2);
        adamw_step(&mut theta, &DenseMatrix::zeros(1, 2), &mut st, &hp, 0.1).unwrap();
        let f = 1.0 - 0.1 * hp.lambda;
        assert!((theta[(0, 0)] - 2.0 * f).abs() < 1e-15);
        assert!((theta[(0, 1)] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_has_unit_magnitude() {
        for (b1, b2) in [(0.9, 0.999), (0.5, 0.5), (0.1, 0.9)] {
            let mut hp = Hyperparams::adamw_default(1);
            hp.beta1 = b1;
            hp.beta2 = b2;
            hp.lambda = 0.0;
            let mut theta = scalar(0.0);
            let mut st = AdamWState::new(1, 1);
            adamw_step(&mut theta, &scalar(3.0), &mut st, &hp, 0.01).unwrap();
            let want = -0.01 * 3.0 / (3.0 + ADAMW_EPS);
            assert!((theta[(0, 0)] - want).abs() < 1e-15);
            assert!(st.v.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn adamw_constant_gradient_approaches_sign_step() {
        let mut hp = Hyperparams::adamw_default(1);
        hp.lambda = 0.0;
        let mut theta = scalar(0.0);
        let mut st = AdamWState::new(1, 1);
        let eta = 0.01;
        let mut prev = 0.0;
        for _ in 0..200 {
            adamw_step(&mut theta, &scalar(-0.7), &mut st, &hp, eta).unwrap();
            let disp = theta[(0, 0)] - prev;
            prev = theta[(0, 0)];
            assert!(disp > 0.0);
        }
        let mut probe = theta.clone();
        adamw_step(&mut probe, &scalar(-0.7), &mut st, &hp, eta).unwrap();
        let disp = probe[(0, 0)] - theta[(0, 0)];
        assert!((disp - eta).abs() <= 0.01 * eta, "{disp}");
    }

    #[test]
    fn sgd_examples() {
        let mut theta = DenseMatrix::row_vector(&[1.0, 2.0]);
        let g = DenseMatrix::row_vector(&[0.5, -1.0]);
        let mut st = SgdState::new(1, 2);
        sgd_momentum_step(&mut theta, &g, &mut st, 0.0, 0.1, 0.0).unwrap();
        assert_eq!(theta.as_slice(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1 * 1.0]);

        let mut theta = scalar(3.0);
        let mut st = SgdState::new(1, 1);
        for _ in 0..10 {
            sgd_momentum_step(&mut theta, &scalar(0.0), &mut st, 0.9, 0.1, 0.5).unwrap();
            assert_eq!(st.m[(0, 0)], 0.0);
        }
        let want = 3.0 * (1.0f64 - 0.05).powi(10);
        assert!((theta[(0, 0)] - want).abs() < 1e-14);

        let mut theta = scalar(0.0);
        let mut st = SgdState::new(1, 1);
        let beta = 0.9f64;
        for _ in 0..50 {
            sgd_momentum_step(&mut theta, &scalar(2.0), &mut st, beta, 0.01, 0.0).unwrap();
        }
        // m_50 = g·(1 − β⁵⁰)
        let gap = (st.m[(0, 0)] - 2.0).abs();
        assert!(gap <= 2.0 * beta.powi(50) * (1.0 + 1e-12));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.01), 0.1);
        assert!((cosine_lr(100, 100, 0.1, 0.01) - 0.01).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1, 0.01) - 0.055).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 0.1, 0.01), 0.01);
        assert_eq!(cosine_lr(0, 0, 0.1, 0.0), 0.1);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::adafish_default(10).validate().is_ok());
        assert!(Hyperparams::adamw_default(10).validate().is_ok());
        let mut hp = Hyperparams::adafish_default(10);
        hp.delta = 0.0;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::adafish_default(10);
        hp.beta1 = 1.0;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::adafish_default(10);
        hp.gamma = -1.0;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn wide_gradient_keeps_orientation() {
        let policy = ParamPolicy::new(OptimizerKind::AdaFish);
        let route = policy.route(ParamKind::Matrix, 4, 100);
        assert_eq!(route, Route::AdaFish(Orientation::GramOnRows));
        let mut slot = ParamState::new(route, 4, 100);
        let mut theta = seeded_gaussian(4, 100, 1, 0.0, 1.0).unwrap();
        let g = seeded_gaussian(4, 100, 2, 0.0, 1.0).unwrap();
        orient_and_dispatch(&mut theta, &g, &mut slot, &Hyperparams::adafish_default(1), 0.1).unwrap();
        match &slot {
            ParamState::AdaFish { state, .. } => assert_eq!(state.h_hat().shape(), (4, 4)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tall_gradient_is_transposed() {
        let policy = ParamPolicy::new(OptimizerKind::AdaFish);
        let route = policy.route(ParamKind::Matrix, 100, 4);
        assert_eq!(route, Route::AdaFish(Orientation::GramOnCols));
        let hp = Hyperparams::adafish_default(1);
        let mut slot = ParamState::new(route, 100, 4);
        let mut theta = seeded_gaussian(100, 4, 3, 0.0, 1.0).unwrap();
        let g = seeded_gaussian(100, 4, 4, 0.0, 1.0).unwrap();
        let mut twin = theta.transpose();
        let mut twin_state = AdaFishState::new(4, 100);
        orient_and_dispatch(&mut theta, &g, &mut slot, &hp, 0.1).unwrap();
        adafish_step(&mut twin, &g.transpose(), &mut twin_state, &hp, 0.1).unwrap();
        assert_eq!(theta.shape(), (100, 4));
        assert_eq!(theta, twin.transpose());
        match &slot {
            ParamState::AdaFish { state, .. } => assert_eq!(state.h_hat().shape(), (4, 4)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vectors_and_huge_matrices_fall_back_to_adamw() {
        let policy = ParamPolicy::new(OptimizerKind::AdaFish);
        assert_eq!(policy.route(ParamKind::Vector, 1, 10), Route::AdamW);
        assert_eq!(policy.route(ParamKind::Matrix, 65, 80), Route::AdamW);
        assert_eq!(
            policy.route(ParamKind::Matrix, 64, 64),
            Route::AdaFish(Orientation::GramOnRows)
        );
        let mut slot = ParamState::new(policy.route(ParamKind::Vector, 1, 10), 1, 10);
        let mut theta = DenseMatrix::zeros(1, 10);
        let g = DenseMatrix::filled(1, 10, 1.0);
        orient_and_dispatch(&mut theta, &g, &mut slot, &Hyperparams::adafish_default(1), 0.1).unwrap();
        assert!(matches!(slot, ParamState::AdamW(ref s) if s.t == 1));
    }

    #[test]
    fn step_info_reports_metric_norm() {
        let hp = Hyperparams::adafish_default(1);
        let mut slot = ParamState::new(Route::AdaFish(Orientation::GramOnRows), 2, 5);
        let mut theta = seeded_gaussian(2, 5, 8, 0.0, 1.0).unwrap();
        let before = theta.clone();
        let g = seeded_gaussian(2, 5, 9, 0.0, 1.0).unwrap();
        let info = orient_and_dispatch(&mut theta, &g, &mut slot, &hp, 0.1).unwrap();
        let delta = before.sub(&theta).unwrap();
        let v = match &slot {
            ParamState::AdaFish { state, .. } => state.metric(&hp),
            _ => unreachable!(),
        };
        let want = delta.frobenius_dot(&v.matmul(&delta).unwrap()).unwrap();
        assert!((info.vnorm_sq - want).abs() <= 1e-12 * want.abs().max(1.0));
        assert!(info.vnorm_sq.is_finite() && info.vnorm_sq >= 0.0);
    }
}
