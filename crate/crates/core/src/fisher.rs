//! Gram-form ("generalized") Fisher information for matrix parameters.
//!
//! For an `r × n` gradient `g` the left Gram `c·g·gᵀ` is `r × r` and the right
//! Gram `c·gᵀ·g` is `n × n` with rank at most `r`. The damped natural
//! directions
//!
//! ```text
//! D_left  = (c·g·gᵀ + λ·I_r)⁻¹ · g
//! D_right = g · (c·gᵀ·g + λ·I_n)⁻¹
//! ```
//!
//! are equal for equal damping (push-through identity), so both only ever
//! factor an `r × r` system. [`natural_dir_right_direct`] forms the `n × n`
//! system explicitly and exists for cross-checking.
//!
//! The remaining functions check, numerically, that the row-Gram Kronecker
//! form matches the vectorized Fisher when gradient columns are iid zero
//! mean ([`verify_lemma1`]) and that the model-expectation Fisher of a
//! softmax regression equals the Hessian of its expected loss
//! ([`verify_fisher_hessian`]).

use crate::error::{Error, Result};
use crate::linalg::{cholesky, push_through_solve, spd_solve, DenseMatrix, SeededRng};

/// Largest `n·r` for which the vectorized Fisher is materialized.
pub const MAX_MATERIALIZED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherGram {
    pub side: Side,
    pub gram: DenseMatrix,
    pub sample_count: usize,
}

/// `batch_size·g·gᵀ` (left) or `batch_size·gᵀ·g` (right).
pub fn fisher_gram(g: &DenseMatrix, side: Side, batch_size: usize) -> Result<FisherGram> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let c = batch_size as f64;
    let gram = match side {
        Side::Left => g.gram_rows().scaled(c),
        Side::Right => g.gram_cols().scaled(c),
    };
    Ok(FisherGram {
        side,
        gram,
        sample_count: batch_size,
    })
}

pub fn natural_dir_left(g: &DenseMatrix, scale: f64, damping: f64) -> Result<DenseMatrix> {
    check_damping(damping)?;
    spd_solve(&g.gram_rows().scaled(scale), g, damping)
}

pub fn natural_dir_right(g: &DenseMatrix, scale: f64, damping: f64) -> Result<DenseMatrix> {
    check_damping(damping)?;
    push_through_solve(g, scale, damping)
}

/// `g·(scale·gᵀg + damping·I_n)⁻¹` through the explicit `n × n` system.
pub fn natural_dir_right_direct(g: &DenseMatrix, scale: f64, damping: f64) -> Result<DenseMatrix> {
    check_damping(damping)?;
    let big = g.gram_cols().scaled(scale);
    // the system is symmetric, so g·A⁻¹ = (A⁻¹·gᵀ)ᵀ
    Ok(spd_solve(&big, &g.transpose(), damping)?.transpose())
}

fn check_damping(damping: f64) -> Result<()> {
    if damping > 0.0 && damping.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("damping must be positive, got {damping}")))
    }
}

/// Monte Carlo discrepancy between the vectorized Fisher and its Kronecker
/// Gram form, per sample size.
#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    pub sample_sizes: Vec<usize>,
    pub frobenius_errors: Vec<f64>,
    /// Least-squares slope of `ln(error)` against `ln(N)`.
    pub decay_exponent: f64,
}

impl Lemma1Report {
    /// `N,frobenius_error` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,frobenius_error\n");
        for (n, e) in self.sample_sizes.iter().zip(&self.frobenius_errors) {
            s.push_str(&format!("{n},{}\n", crate::linalg::format_f64(*e)));
        }
        s
    }

    pub fn summary_line(&self) -> String {
        format!("decay_exponent={:.6}", self.decay_exponent)
    }

    /// `error(first N) / error(last N)`.
    pub fn end_to_end_ratio(&self) -> f64 {
        self.frobenius_errors[0] / self.frobenius_errors[self.frobenius_errors.len() - 1]
    }
}

/// Draws `N` gradients `g ∈ R^{r×n}` whose columns are iid `N(0, covariance)`
/// and compares `E_N[vec(g)vec(g)ᵀ]` with `I_n ⊗ E_N[g gᵀ/n]`.
///
/// Each sample size uses its own sub-stream of `seed`.
pub fn verify_lemma1(
    n: usize,
    r: usize,
    covariance: &DenseMatrix,
    sample_sizes: &[usize],
    seed: u64,
) -> Result<Lemma1Report> {
    if n * r > MAX_MATERIALIZED_DIM {
        return Err(Error::TooLarge(format!(
            "vec-Fisher of size {0}x{0} (n·r = {0} > {MAX_MATERIALIZED_DIM})",
            n * r
        )));
    }
    if n == 0 || r == 0 {
        return Err(Error::invalid("n and r must be positive"));
    }
    if covariance.shape() != (r, r) {
        return Err(Error::Dimension {
            op: "verify_lemma1",
            lhs: (r, r),
            rhs: covariance.shape(),
        });
    }
    if sample_sizes.len() < 2 || sample_sizes.contains(&0) {
        return Err(Error::invalid("need at least two positive sample sizes"));
    }
    let chol = cholesky(covariance)?;
    let dim = n * r;
    let mut errors = Vec::with_capacity(sample_sizes.len());
    for (stream, &count) in sample_sizes.iter().enumerate() {
        let mut rng = SeededRng::with_stream(seed, stream as u64);
        let mut vec_outer = vec![0.0; dim * dim];
        let mut row_gram = DenseMatrix::zeros(r, r);
        let mut g = DenseMatrix::zeros(r, n);
        let mut vg = vec![0.0; dim];
        for _ in 0..count {
            for col in 0..n {
                let z: Vec<f64> = (0..r).map(|_| rng.standard_normal()).collect();
                for i in 0..r {
                    let mut v = 0.0;
                    for k in 0..=i {
                        v += chol[(i, k)] * z[k];
                    }
                    g[(i, col)] = v;
                    vg[col * r + i] = v;
                }
            }
            for a in 0..dim {
                let va = vg[a];
                let row = &mut vec_outer[a * dim..(a + 1) * dim];
                for (o, &vb) in row.iter_mut().zip(&vg) {
                    *o += va * vb;
                }
            }
            row_gram.axpy(1.0, &g.gram_rows())?;
        }
        let inv_count = 1.0 / count as f64;
        let block = row_gram.scaled(inv_count / n as f64);
        let mut err_sq = 0.0;
        for a in 0..dim {
            for b in 0..dim {
                let (col_a, i) = (a / r, a % r);
                let (col_b, j) = (b / r, b % r);
                let kron = if col_a == col_b { block[(i, j)] } else { 0.0 };
                let d = vec_outer[a * dim + b] * inv_count - kron;
                err_sq += d * d;
            }
        }
        errors.push(err_sq.sqrt());
    }
    let decay_exponent = log_log_slope(sample_sizes, &errors);
    Ok(Lemma1Report {
        sample_sizes: sample_sizes.to_vec(),
        frobenius_errors: errors,
        decay_exponent,
    })
}

fn log_log_slope(xs: &[usize], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&x| (x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Softmax regression `p(y|x, θ) = softmax(θ·x)` with `θ ∈ R^{C×d}`.
///
/// Parameters are vectorized row-major: index `c·d + j` is `θ[c, j]`.
#[derive(Clone, Debug)]
pub struct SoftmaxRegression {
    pub x: DenseMatrix,
}

impl SoftmaxRegression {
    pub fn new(x: DenseMatrix) -> Self {
        Self { x }
    }

    pub fn probabilities(&self, theta: &DenseMatrix) -> Result<DenseMatrix> {
        let logits = self.x.matmul_t(theta)?;
        Ok(DenseMatrix::from_fn(logits.rows(), logits.cols(), |i, c| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // summed in ascending order so relabelling classes cannot change the rounding
            let mut terms: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            terms.sort_by(f64::total_cmp);
            let sum: f64 = terms.iter().sum();
            (row[c] - max).exp() / sum
        }))
    }

    /// Gradient of `(1/m) Σ_x Σ_y w(y|x)·(−log p(y|x, θ))` for fixed label
    /// weights `w` (rows summing to one).
    pub fn expected_loss_grad(&self, theta: &DenseMatrix, weights: &DenseMatrix) -> Result<DenseMatrix> {
        let p = self.probabilities(theta)?;
        let resid = p.sub(weights)?;
        let m = self.x.rows().max(1) as f64;
        Ok(resid.t_matmul(&self.x)?.scaled(1.0 / m))
    }

    /// Model-expectation Fisher
    /// `(1/m) Σ_x Σ_y p(y|x)·∇log p(y|x) ∇log p(y|x)ᵀ`, summed over every label.
    pub fn fisher(&self, theta: &DenseMatrix) -> Result<DenseMatrix> {
        let p = self.probabilities(theta)?;
        let (c, d) = theta.shape();
        let dim = c * d;
        let mut f = DenseMatrix::zeros(dim, dim);
        let mut score = vec![0.0; dim];
        for i in 0..self.x.rows() {
            let x = self.x.row(i);
            let pi = p.row(i);
            for y in 0..c {
                // ∇_θ log p(y|x) = (e_y − p) ⊗ x
                for a in 0..c {
                    let coef = if a == y { 1.0 } else { 0.0 } - pi[a];
                    for j in 0..d {
                        score[a * d + j] = coef * x[j];
                    }
                }
                for a in 0..dim {
                    let sa = pi[y] * score[a];
                    if sa == 0.0 {
                        continue;
                    }
                    let row = f.row_mut(a);
                    for (o, &sb) in row.iter_mut().zip(&score) {
                        *o += sa * sb;
                    }
                }
            }
        }
        let m = self.x.rows().max(1) as f64;
        f.scale_in_place(1.0 / m);
        Ok(f)
    }

    /// Hessian of the expected loss by central differences of its gradient,
    /// with label weights frozen at `p(·|x, θ)`.
    pub fn hessian_fd(&self, theta: &DenseMatrix, step: f64) -> Result<DenseMatrix> {
        let weights = self.probabilities(theta)?;
        let (c, d) = theta.shape();
        let dim = c * d;
        let mut h = DenseMatrix::zeros(dim, dim);
        for col in 0..dim {
            let mut plus = theta.clone();
            plus.as_mut_slice()[col] += step;
            let mut minus = theta.clone();
            minus.as_mut_slice()[col] -= step;
            let gp = self.expected_loss_grad(&plus, &weights)?;
            let gm = self.expected_loss_grad(&minus, &weights)?;
            for row in 0..dim {
                h[(row, col)] = (gp.as_slice()[row] - gm.as_slice()[row]) / (2.0 * step);
            }
        }
        h.symmetrize();
        Ok(h)
    }
}

/// `max_ij |a_ij − b_ij| / max(|b_ij|, floor)`.
pub fn max_relative_entry_error(a: &DenseMatrix, b: &DenseMatrix, floor: f64) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(d, bv)| d.abs() / bv.abs().max(floor))
        .fold(0.0, f64::max))
}

/// Entry floor for [`verify_fisher_hessian`]'s relative error.
pub const FISHER_HESSIAN_FLOOR: f64 = 1e-8;
const HESSIAN_FD_STEP: f64 = 1e-5;

/// Max relative entrywise gap between the exact Fisher and the
/// finite-difference Hessian of a random softmax regression.
pub fn verify_fisher_hessian(
    feature_dim: usize,
    num_classes: usize,
    num_points: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let x = rng.gaussian_matrix(num_points, feature_dim, 0.0, 1.0);
    let theta = rng.gaussian_matrix(num_classes, feature_dim, 0.0, 1.0);
    fisher_hessian_error(&SoftmaxRegression::new(x), &theta)
}

pub fn fisher_hessian_error(model: &SoftmaxRegression, theta: &DenseMatrix) -> Result<f64> {
    let f = model.fisher(theta)?;
    let h = model.hessian_fd(theta, HESSIAN_FD_STEP)?;
    max_relative_entry_error(&f, &h, FISHER_HESSIAN_FLOOR)
}
