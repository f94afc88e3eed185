mod common;

use adafish::linalg::{dense_inverse, push_through_solve, seeded_gaussian, spd_solve, SeededRng};
use adafish::DenseMatrix;
use common::{naive_matmul, random_spd, rel_err};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
}

fn chain() -> impl Strategy<Value = (DenseMatrix, DenseMatrix, DenseMatrix)> {
    (1usize..8, 1usize..8, 1usize..8, 1usize..8)
        .prop_flat_map(|(m, k, p, q)| (matrix(m, k), matrix(k, p), matrix(p, q)))
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in chain()) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.frobenius_norm().max(1.0);
        prop_assert!(left.sub(&right).unwrap().frobenius_norm() <= 1e-12 * scale);
    }

    #[test]
    fn matmul_matches_naive_loops((a, b, _c) in chain()) {
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        prop_assert!(fast.sub(&slow).unwrap().max_abs() <= 1e-12 * slow.max_abs().max(1.0));
    }

    #[test]
    fn text_round_trip_is_bitwise(a in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assert_eq!(DenseMatrix::from_text(&a.to_text()).unwrap(), a);
    }
}

#[test]
fn push_through_matches_direct_inverse() {
    let mut rng = SeededRng::new(2024);
    for trial in 0..100 {
        let r = 1 + rng.below(8);
        let n = r + rng.below(65 - r);
        let g = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let (scale, damping) = (1.0, 0.1);
        let fast = push_through_solve(&g, scale, damping).unwrap();
        let mut big = g.gram_cols().scaled(scale);
        big.add_diagonal(damping);
        let direct = g.matmul(&dense_inverse(&big).unwrap()).unwrap();
        let err = rel_err(&fast, &direct);
        assert!(err <= 1e-10, "trial {trial} (r={r}, n={n}): {err:e}");
    }
}

#[test]
fn kronecker_inverse_acts_columnwise() {
    let mut rng = SeededRng::new(31);
    for (r, n) in [(2, 3), (3, 4), (4, 8), (8, 8), (1, 64)] {
        assert!(r * n <= 64);
        let a = random_spd(r, &mut rng);
        let d = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let x = spd_solve(&a, &d, 0.0).unwrap();
        let big = DenseMatrix::identity(n).kron(&a);
        let vec_x = dense_inverse(&big).unwrap().matmul(&d.vec_cols()).unwrap();
        let reshaped = DenseMatrix::unvec_cols(vec_x.as_slice(), r, n).unwrap();
        assert!(rel_err(&x, &reshaped) <= 1e-10, "r={r} n={n}");
    }
}

#[test]
fn spd_solve_residual_bound() {
    let mut rng = SeededRng::new(77);
    for trial in 0..1000 {
        let n = 1 + rng.below(12);
        let k = 1 + rng.below(4);
        let s = random_spd(n, &mut rng);
        let b = rng.gaussian_matrix(n, k, 0.0, 1.0);
        let damping = if trial % 2 == 0 { 0.0 } else { rng.uniform() };
        let x = spd_solve(&s, &b, damping).unwrap();
        let mut sd = s.clone();
        sd.add_diagonal(damping);
        let resid = sd.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(resid <= 1e-10 * b.frobenius_norm().max(1.0), "trial {trial}: {resid:e}");
    }
}

#[test]
fn seeded_gaussian_is_reproducible_across_calls() {
    let a = seeded_gaussian(16, 16, 99, 1.5, 0.25).unwrap();
    let mut rng = SeededRng::new(99);
    let b = rng.gaussian_matrix(16, 16, 1.5, 0.25);
    assert_eq!(a, b);
}
