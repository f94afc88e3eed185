//! Self-check suites. Each check prints one `key=value` line:
//!
//! ```text
//! check=smw_vs_dense_inverse measured=3.1e-15 threshold=<=1e-10 result=PASS
//! ```

use std::fmt;
use std::str::FromStr;

use adafish::fisher::{natural_dir_left, natural_dir_right, verify_fisher_hessian, verify_lemma1};
use adafish::linalg::{dense_inverse, spd_solve, SeededRng};
use adafish::lora::{finite_diff_check, Activation, Batch, LoraLinear, MlpModel, Targets};
use adafish::optim::{
    adafish_step, momentum_step, orient_and_dispatch, AdaFishState, Hyperparams, MomentumState, OptimizerKind,
    ParamKind, ParamPolicy, ParamState, Schedule,
};
use adafish::tensor::{
    cp_reconstruct, param_count, slice_cost_model, tucker_reconstruct, CpFactors, DecompositionKind, DenseTensor3,
    TuckerFactors,
};
use adafish::DenseMatrix;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Linalg,
    Model,
    Fisher,
    Optim,
    Tensor,
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "linalg" => Suite::Linalg,
            "model" => Suite::Model,
            "fisher" => Suite::Fisher,
            "optim" => Suite::Optim,
            "tensor" => Suite::Tensor,
            other => {
                return Err(HarnessError::Usage(format!(
                    "unknown suite {other:?} (expected all, linalg, model, fisher, optim or tensor)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    AtMost(f64),
    AtLeast(f64),
    Equals(f64),
}

impl Threshold {
    pub fn accepts(self, x: f64) -> bool {
        match self {
            Threshold::AtMost(t) => x <= t,
            Threshold::AtLeast(t) => x >= t,
            Threshold::Equals(t) => x == t,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::AtMost(t) => write!(f, "<={t:e}"),
            Threshold::AtLeast(t) => write!(f, ">={t:e}"),
            Threshold::Equals(t) => write!(f, "=={t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: Threshold,
}

impl Check {
    fn new(name: &str, measured: f64, threshold: Threshold) -> Self {
        Self {
            name: name.to_string(),
            measured,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        self.threshold.accepts(self.measured)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} measured={:e} threshold={} result={}",
            self.name,
            self.measured,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Negative control: the fast SMW path solves with doubled damping.
    pub mutate_smw: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }

    pub fn all_passed(&self) -> bool {
        self.failed() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(f, "summary checks={} failed={}", self.checks.len(), self.failed())
    }
}

pub fn run_suite(suite: Suite, opts: VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let want = |s: Suite| suite == Suite::All || suite == s;
    if want(Suite::Linalg) {
        linalg_checks(opts, &mut checks)?;
    }
    if want(Suite::Model) {
        model_checks(&mut checks)?;
    }
    if want(Suite::Fisher) {
        fisher_checks(&mut checks)?;
    }
    if want(Suite::Optim) {
        optim_checks(&mut checks)?;
    }
    if want(Suite::Tensor) {
        tensor_checks(&mut checks)?;
    }
    Ok(VerifyReport { checks })
}

fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let denom = b.frobenius_norm();
    Ok(if denom > 0.0 { diff / denom } else { diff })
}

fn linalg_checks(opts: VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = SeededRng::new(2024);
    let (scale, damping) = (1.0, 0.1);
    let mut worst_smw = 0.0f64;
    let mut worst_lr = 0.0f64;
    for _ in 0..100 {
        let r = 1 + rng.below(8);
        let n = r + rng.below(65 - r);
        let g = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let fast_damping = if opts.mutate_smw { 2.0 * damping } else { damping };
        let fast = natural_dir_right(&g, scale, fast_damping)?;
        let mut big = g.gram_cols().scaled(scale);
        big.add_diagonal(damping);
        let direct = g.matmul(&dense_inverse(&big)?)?;
        worst_smw = worst_smw.max(rel_err(&fast, &direct)?);
        let left = natural_dir_left(&g, scale, damping)?;
        worst_lr = worst_lr.max(rel_err(&left, &direct)?);
    }
    out.push(Check::new("smw_vs_dense_inverse", worst_smw, Threshold::AtMost(1e-10)));
    out.push(Check::new("left_right_direction", worst_lr, Threshold::AtMost(1e-10)));

    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = 1 + rng.below(12);
        let a = rng.gaussian_matrix(n, n, 0.0, 1.0);
        let mut s = a.matmul_t(&a)?;
        s.add_diagonal(1.0);
        let b = rng.gaussian_matrix(n, 3, 0.0, 1.0);
        let d = if trial % 2 == 0 { 0.0 } else { rng.uniform() };
        let x = spd_solve(&s, &b, d)?;
        s.add_diagonal(d);
        let resid = s.matmul(&x)?.sub(&b)?.frobenius_norm() / b.frobenius_norm().max(1.0);
        worst = worst.max(resid);
    }
    out.push(Check::new("spd_solve_residual", worst, Threshold::AtMost(1e-10)));

    let mut worst = 0.0f64;
    for (r, n) in [(2, 3), (4, 8), (8, 8)] {
        let a = rng.gaussian_matrix(r, r, 0.0, 1.0);
        let mut s = a.matmul_t(&a)?;
        s.add_diagonal(1.0);
        let d = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let x = spd_solve(&s, &d, 0.0)?;
        let vec_x = dense_inverse(&DenseMatrix::identity(n).kron(&s))?.matmul(&d.vec_cols())?;
        worst = worst.max(rel_err(&x, &DenseMatrix::unvec_cols(vec_x.as_slice(), r, n)?)?);
    }
    out.push(Check::new("kronecker_columnwise_inverse", worst, Threshold::AtMost(1e-10)));
    Ok(())
}

/// Two-layer tanh LoRA model with non-zero factors and biases.
pub fn random_two_layer(seed: u64, dims: [usize; 3], rank: usize, batch: usize) -> Result<(MlpModel, Batch)> {
    let mut rng = SeededRng::new(seed);
    let mut layers = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let (n, k) = (w[0], w[1]);
        let w0 = rng.gaussian_matrix(n, k, 0.0, 1.0 / (n as f64).sqrt());
        let u = rng.gaussian_matrix(rank, n, 0.0, 0.3);
        let v = rng.gaussian_matrix(rank, k, 0.0, 0.3);
        layers.push(LoraLinear::new(w0, u, v, 1.0)?);
        biases.push(rng.gaussian_matrix(1, k, 0.0, 0.1));
    }
    let model = MlpModel::new(layers, biases, Activation::Tanh)?;
    let x = rng.gaussian_matrix(batch, dims[0], 0.0, 1.0);
    let labels = (0..batch).map(|_| rng.below(dims[2])).collect();
    Ok((model, Batch::new(x, Targets::Classes(labels))?))
}

fn model_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (model, batch) = random_two_layer(seed, [16, 12, 8], 4, 10)?;
        worst = worst.max(finite_diff_check(&model, &batch, 1e-6)?);
    }
    out.push(Check::new("finite_diff_two_layer_tanh", worst, Threshold::AtMost(1e-5)));

    let (mut model, batch) = random_two_layer(9, [16, 12, 8], 4, 10)?;
    let frozen: Vec<DenseMatrix> = model.layers().iter().map(|l| l.base().clone()).collect();
    let hp = Hyperparams::adafish_default(20);
    let policy = ParamPolicy::new(OptimizerKind::AdaFish);
    let ids = model.param_ids(true);
    let mut states: Vec<ParamState> = ids
        .iter()
        .map(|&id| {
            let (r, c) = model.param(id).shape();
            let kind = if id.is_vector() { ParamKind::Vector } else { ParamKind::Matrix };
            ParamState::new(policy.route(kind, r, c), r, c)
        })
        .collect();
    for step in 0..20 {
        let (_, grads) = model.loss_and_grad(&batch)?;
        for (&id, st) in ids.iter().zip(states.iter_mut()) {
            orient_and_dispatch(model.param_mut(id), grads.get(id), st, &hp, hp.lr(step))?;
        }
    }
    let changed = model
        .layers()
        .iter()
        .zip(&frozen)
        .flat_map(|(l, w)| l.base().as_slice().iter().zip(w.as_slice()))
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    out.push(Check::new("frozen_base_entries_changed", changed as f64, Threshold::Equals(0.0)));
    Ok(())
}

/// Covariance used by the Kronecker Monte Carlo check: `AAᵀ + I/2`.
pub fn lemma1_covariance() -> DenseMatrix {
    let a = SeededRng::new(99).gaussian_matrix(4, 4, 0.0, 1.0);
    let mut c = a.matmul_t(&a).expect("square");
    c.add_diagonal(0.5);
    c
}

fn fisher_checks(out: &mut Vec<Check>) -> Result<()> {
    let cov = lemma1_covariance();
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut emin, mut emax) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..10 {
        let rep = verify_lemma1(8, 4, &cov, &[1_000, 10_000, 100_000], seed)?;
        let ratio = rep.end_to_end_ratio();
        rmin = rmin.min(ratio);
        rmax = rmax.max(ratio);
        emin = emin.min(rep.decay_exponent);
        emax = emax.max(rep.decay_exponent);
    }
    out.push(Check::new("lemma1_error_ratio_min", rmin, Threshold::AtLeast(5.0)));
    out.push(Check::new("lemma1_error_ratio_max", rmax, Threshold::AtMost(20.0)));
    out.push(Check::new("lemma1_decay_exponent_min", emin, Threshold::AtLeast(-0.65)));
    out.push(Check::new("lemma1_decay_exponent_max", emax, Threshold::AtMost(-0.35)));
    out.push(Check::new(
        "fisher_hessian_3x3",
        verify_fisher_hessian(3, 3, 20, 0)?,
        Threshold::AtMost(1e-5),
    ));
    Ok(())
}

fn constant_hp(beta1: f64, gamma: f64, delta: f64, lambda: f64) -> Hyperparams {
    Hyperparams {
        eta0: 0.1,
        eta_min: 0.0,
        total_steps: 1,
        lambda,
        gamma,
        beta1,
        beta2: 0.99,
        delta,
        schedule: Schedule::Constant,
    }
}

fn optim_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut rng = SeededRng::new(5);
    let g = rng.gaussian_matrix(3, 7, 0.0, 2.0);
    let mut theta = rng.gaussian_matrix(3, 7, 0.0, 1.0);
    let mut st = AdaFishState::new(3, 7);
    adafish_step(&mut theta, &g, &mut st, &Hyperparams::adafish_default(10), 0.1)?;
    let gap = st.m_hat().sub(&g)?.max_abs().max(st.h_hat().sub(&g.gram_rows())?.max_abs());
    out.push(Check::new("first_step_bias_correction", gap, Threshold::Equals(0.0)));

    let hp = Hyperparams::adafish_default(100);
    let (eta, k) = (0.1, 100);
    let theta0 = rng.gaussian_matrix(3, 7, 0.0, 1.0);
    let mut theta = theta0.clone();
    let mut want = theta0.clone();
    let mut st = AdaFishState::new(3, 7);
    let zero = DenseMatrix::zeros(3, 7);
    for _ in 0..k {
        adafish_step(&mut theta, &zero, &mut st, &hp, eta)?;
        want.scale_in_place(1.0 - eta * hp.lambda);
    }
    out.push(Check::new("zero_gradient_decay", theta.sub(&want)?.max_abs(), Threshold::Equals(0.0)));
    let closed = theta0.scaled((1.0 - eta * hp.lambda).powi(k));
    out.push(Check::new(
        "zero_gradient_decay_closed_form",
        theta.sub(&closed)?.max_abs(),
        Threshold::AtMost(1e-13),
    ));

    let hp = constant_hp(0.8, 0.0, 1.0, 0.1);
    let mut a = rng.gaussian_matrix(4, 6, 0.0, 1.0);
    let mut b = a.clone();
    let mut sa = AdaFishState::new(4, 6);
    let mut sb = MomentumState::new(4, 6);
    let mut worst = 0.0f64;
    for s in 0..500 {
        let g = rng.gaussian_matrix(4, 6, 0.0, 1.0);
        let eta = adafish::optim::cosine_lr(s, 500, 0.1, 0.0);
        adafish_step(&mut a, &g, &mut sa, &hp, eta)?;
        momentum_step(&mut b, &g, &mut sb, hp.beta1, eta, hp.lambda)?;
        worst = worst.max(a.sub(&b)?.max_abs());
    }
    out.push(Check::new("unit_preconditioner_is_momentum", worst, Threshold::AtMost(1e-12)));

    let steps = 200;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = SeededRng::new(seed);
        let target = rng.gaussian_matrix(4, 64, 0.0, 1.0);
        let mut theta = rng.gaussian_matrix(4, 64, 0.0, 1.0);
        let hp = Hyperparams::adafish_default(steps);
        let mut st = AdaFishState::new(4, 64);
        let f0 = theta.sub(&target)?.frobenius_norm_sq();
        for step in 0..steps {
            let g = theta.sub(&target)?;
            adafish_step(&mut theta, &g, &mut st, &hp, hp.lr(step))?;
        }
        worst = worst.max(theta.sub(&target)?.frobenius_norm_sq() / f0);
    }
    out.push(Check::new("quadratic_descent_ratio", worst, Threshold::AtMost(1e-6)));
    Ok(())
}

fn tucker_loops(f: &TuckerFactors) -> DenseTensor3 {
    let r = f.rank();
    DenseTensor3::from_fn(f.output_dims(), |i, j, k| {
        let mut acc = 0.0;
        for a in 0..r {
            for b in 0..r {
                for c in 0..r {
                    acc += f.core.get(a, b, c) * f.p[(a, i)] * f.a[(b, j)] * f.b[(c, k)];
                }
            }
        }
        f.s * acc
    })
}

fn cp_loops(f: &CpFactors) -> DenseTensor3 {
    DenseTensor3::from_fn((f.p.cols(), f.a.cols(), f.b.cols()), |i, j, k| {
        (0..f.rank())
            .map(|t| f.lambda[t] * f.p[(t, i)] * f.a[(t, j)] * f.b[(t, k)])
            .sum()
    })
}

fn tensor_rel(a: &DenseTensor3, b: &DenseTensor3) -> Result<f64> {
    let scale = b.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    Ok(a.max_abs_diff(b)? / scale)
}

fn tensor_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut rng = SeededRng::new(11);
    let (mut wt, mut wc) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let r = 1 + rng.below(3);
        let dims = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let core = DenseTensor3::from_fn((r, r, r), |_, _, _| rng.standard_normal());
        let s = rng.normal(0.0, 2.0);
        let f = TuckerFactors::new(
            s,
            core,
            rng.gaussian_matrix(r, dims.0, 0.0, 1.0),
            rng.gaussian_matrix(r, dims.1, 0.0, 1.0),
            rng.gaussian_matrix(r, dims.2, 0.0, 1.0),
        )?;
        wt = wt.max(tensor_rel(&tucker_reconstruct(&f), &tucker_loops(&f))?);
        let lambda = (0..r).map(|_| rng.standard_normal()).collect();
        let c = CpFactors::new(
            lambda,
            rng.gaussian_matrix(r, dims.0, 0.0, 1.0),
            rng.gaussian_matrix(r, dims.1, 0.0, 1.0),
            rng.gaussian_matrix(r, dims.2, 0.0, 1.0),
        )?;
        wc = wc.max(tensor_rel(&cp_reconstruct(&c), &cp_loops(&c))?);
    }
    out.push(Check::new("tucker_vs_loops", wt, Threshold::AtMost(1e-12)));
    out.push(Check::new("cp_vs_loops", wc, Threshold::AtMost(1e-12)));
    out.push(Check::new(
        "param_count_tucker",
        param_count(DecompositionKind::Tucker, 12, 768, 8) as f64,
        Threshold::Equals(13952.0),
    ));
    out.push(Check::new(
        "param_count_cp",
        param_count(DecompositionKind::Cp, 12, 768, 8) as f64,
        Threshold::Equals(13448.0),
    ));
    let mut mismatches = 0usize;
    for (l, n, k, r) in [(1, 4, 4, 2), (12, 768, 768, 8), (3, 10, 20, 5), (7, 1, 1, 0)] {
        let c = slice_cost_model(l, n, k, r);
        if c.flops != (n + k + l * r) * r * r || c.storage != (l + 2) * r * r {
            mismatches += 1;
        }
    }
    out.push(Check::new("slice_cost_formula_mismatches", mismatches as f64, Threshold::Equals(0.0)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_semantics() {
        assert!(Threshold::AtMost(1.0).accepts(1.0));
        assert!(!Threshold::AtMost(1.0).accepts(f64::NAN));
        assert!(Threshold::AtLeast(-1.0).accepts(0.0));
        assert!(!Threshold::Equals(0.0).accepts(1e-300));
    }

    #[test]
    fn line_format() {
        let c = Check::new("x", 0.5, Threshold::AtMost(1.0));
        assert_eq!(c.to_string(), "check=x measured=5e-1 threshold=<=1e0 result=PASS");
    }

    #[test]
    fn unknown_suite_is_usage_error() {
        assert!(matches!("nope".parse::<Suite>(), Err(HarnessError::Usage(_))));
    }
}
