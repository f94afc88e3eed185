//! Small symmetric positive definite solves.
//!
//! Every curvature system in this crate is an `r × r` Gram matrix plus a
//! diagonal damping term, so a plain Cholesky factorization is the workhorse.
//! Exponential moving averages of Gram matrices can be numerically
//! semidefinite; when the factorization breaks down we retry with a jitter
//! ladder `1e-12, 1e-11, …, 1e-4` added to the diagonal before giving up.

use log::warn;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// First jitter added to the diagonal after a failed factorization.
pub const JITTER_START: f64 = 1e-12;
/// Largest jitter tried before reporting a singular system.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower-triangular Cholesky factor `L` with `S = L Lᵀ`.
///
/// Fails with [`Error::Singular`] (jitter 0) on a non-positive pivot.
pub fn cholesky(s: &DenseMatrix) -> Result<DenseMatrix> {
    if !s.is_square() {
        return Err(Error::Dimension {
            op: "cholesky",
            lhs: s.shape(),
            rhs: s.shape(),
        });
    }
    cholesky_factor(s).ok_or(Error::Singular { jitter: 0.0 })
}

fn cholesky_factor(s: &DenseMatrix) -> Option<DenseMatrix> {
    let n = s.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d.is_finite() && d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::Dimension {
            op: "cholesky_solve",
            lhs: l.shape(),
            rhs: b.shape(),
        });
    }
    let m = b.cols();
    let mut x = b.clone();
    // forward: L Y = B
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lik * v;
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    // backward: Lᵀ X = Y
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lki * v;
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    Ok(x)
}

/// Solves `(S + damping·I) X = B` for symmetric `S`.
///
/// `S` is symmetrized to `(S + Sᵀ)/2` first. If the Cholesky factorization
/// fails or yields a non-finite solution, the jitter ladder is walked; the
/// error reports the last jitter tried.
pub fn spd_solve(s: &DenseMatrix, b: &DenseMatrix, damping: f64) -> Result<DenseMatrix> {
    solve_damped(s, b, damping, true)
}

fn solve_damped(
    s: &DenseMatrix,
    b: &DenseMatrix,
    damping: f64,
    allow_jitter: bool,
) -> Result<DenseMatrix> {
    if !s.is_square() || s.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "spd_solve",
            lhs: s.shape(),
            rhs: b.shape(),
        });
    }
    if !(damping.is_finite() && damping >= 0.0) {
        return Err(Error::invalid(format!(
            "damping must be finite and nonnegative, got {damping}"
        )));
    }
    let mut sym = s.clone();
    sym.symmetrize();
    sym.add_diagonal(damping);

    if let Some(x) = factor_and_solve(&sym, b) {
        return Ok(x);
    }
    if !allow_jitter {
        return Err(Error::Singular { jitter: 0.0 });
    }
    let mut jitter = JITTER_START;
    loop {
        let mut shifted = sym.clone();
        shifted.add_diagonal(jitter);
        if let Some(x) = factor_and_solve(&shifted, b) {
            return Ok(x);
        }
        if jitter >= JITTER_MAX {
            return Err(Error::Singular { jitter });
        }
        jitter = (jitter * 10.0).min(JITTER_MAX);
    }
}

fn factor_and_solve(sym: &DenseMatrix, b: &DenseMatrix) -> Option<DenseMatrix> {
    let l = cholesky_factor(sym)?;
    let x = cholesky_solve(&l, b).ok()?;
    x.is_finite().then_some(x)
}

/// Computes `g · (scale·gᵀg + damping·I_n)⁻¹` for an `r × n` matrix `g`.
///
/// Uses the push-through identity
/// `g (c gᵀg + λ I_n)⁻¹ = (c g gᵀ + λ I_r)⁻¹ g`, so only an `r × r` system is
/// factored. `damping == 0` is accepted only when the `n × n` operator can be
/// nonsingular (`r ≥ n`) and no jitter is applied in that case.
pub fn push_through_solve(g: &DenseMatrix, scale: f64, damping: f64) -> Result<DenseMatrix> {
    let (r, n) = g.shape();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if r > n {
        warn!("push_through_solve: r = {r} exceeds n = {n}; the small side is not smaller");
    }
    let small = g.gram_rows().scaled(scale);
    if damping == 0.0 {
        // c·gᵀg has rank ≤ r, so it is singular whenever r < n.
        if r < n {
            return Err(Error::Singular { jitter: 0.0 });
        }
        return solve_damped(&small, g, 0.0, false);
    }
    spd_solve(&small, g, damping)
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
///
/// Independent of the Cholesky path; used as a reference when checking the
/// structured solves against a dense computation.
pub fn dense_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op: "dense_inverse",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let n = a.rows();
    let mut work = a.clone();
    let mut inv = DenseMatrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| work[(i, col)].abs().total_cmp(&work[(j, col)].abs()))
            .unwrap_or(col);
        let pivot = work[(pivot_row, col)];
        if pivot.abs() <= scale * 1e-14 * n as f64 {
            return Err(Error::Singular { jitter: 0.0 });
        }
        if pivot_row != col {
            for j in 0..n {
                let (x, y) = (work[(col, j)], work[(pivot_row, j)]);
                work[(col, j)] = y;
                work[(pivot_row, j)] = x;
                let (x, y) = (inv[(col, j)], inv[(pivot_row, j)]);
                inv[(col, j)] = y;
                inv[(pivot_row, j)] = x;
            }
        }
        for j in 0..n {
            work[(col, j)] /= pivot;
            inv[(col, j)] /= pivot;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = work[(i, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                work[(i, j)] -= f * work[(col, j)];
                inv[(i, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}
